//! Role-tagged context sequence and three-axis rotary position encoding.
//!
//! Every token carries a `(role, row, col)` position. Roles are coordinates on
//! their own rotary axis, so attention between tokens of different images sees
//! a role offset while tokens of the same image keep their 2-D geometry.

use std::sync::Arc;

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{Real, RotationTable};

/// ICL role of a token's image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Role {
    ExemplarSource = 0,
    ExemplarTarget = 1,
    QuerySource = 2,
    QueryTarget = 3,
}

impl Role {
    pub const CONDITION: [Role; 3] = [Role::ExemplarSource, Role::ExemplarTarget, Role::QuerySource];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PositionTriple {
    pub role: Role,
    pub row: usize,
    pub col: usize,
}

impl PositionTriple {
    fn axes(self) -> [usize; 3] {
        [self.role.index(), self.row, self.col]
    }
}

/// `[z_s | z_t | z_q]` with per-token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSequence {
    tokens: Vec<f32>,
    positions: Vec<PositionTriple>,
    /// Tokens per image.
    segment_len: usize,
    dim: usize,
    rows: usize,
    cols: usize,
    patch: usize,
}

impl ConditionSequence {
    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn positions(&self) -> &[PositionTriple] {
        &self.positions
    }

    /// Total token count, always `3L`.
    pub fn len(&self) -> usize {
        3 * self.segment_len
    }

    pub fn is_empty(&self) -> bool {
        self.segment_len == 0
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Segment order, always exemplar source, exemplar target, query source.
    pub fn layout(&self) -> [Role; 3] {
        Role::CONDITION
    }

    /// Tokens of one role's image.
    pub fn segment(&self, role: Role) -> Result<TokenGrid> {
        let k = role.index();
        if k >= 3 {
            return Err(Error::Contract("the target is not part of the condition".into()));
        }
        let n = self.segment_len * self.dim;
        TokenGrid::new(self.tokens[k * n..(k + 1) * n].to_vec(), self.rows, self.cols, self.patch)
    }

    /// Grid shared by all three images.
    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.patch)
    }
}

/// Concatenates the three context images along the sequence axis and tags
/// each segment with its role.
pub fn build_condition_sequence(
    z_s: &TokenGrid,
    z_t: &TokenGrid,
    z_q: &TokenGrid,
) -> Result<ConditionSequence> {
    for other in [z_t, z_q] {
        if !z_s.same_geometry(other) {
            return Err(Error::shape(
                "condition sequence",
                &[z_s.rows, z_s.cols, z_s.dim()],
                &[other.rows, other.cols, other.dim()],
            ));
        }
    }
    let mut tokens = Vec::with_capacity(3 * z_s.tokens.len());
    let mut positions = Vec::with_capacity(3 * z_s.len());
    for (grid, role) in [z_s, z_t, z_q].into_iter().zip(Role::CONDITION) {
        tokens.extend_from_slice(&grid.tokens);
        positions.extend(grid_positions(grid.rows, grid.cols, role));
    }
    Ok(ConditionSequence {
        tokens,
        positions,
        segment_len: z_s.len(),
        dim: z_s.dim(),
        rows: z_s.rows,
        cols: z_s.cols,
        patch: z_s.patch,
    })
}

/// Positions of the noisy target: role 3 on the query grid.
pub fn assign_target_positions(z_y: &TokenGrid) -> Vec<PositionTriple> {
    grid_positions(z_y.rows, z_y.cols, Role::QueryTarget).collect()
}

fn grid_positions(rows: usize, cols: usize, role: Role) -> impl Iterator<Item = PositionTriple> {
    (0..rows).flat_map(move |row| (0..cols).map(move |col| PositionTriple { role, row, col }))
}

/// Positions of the full `[condition | target]` sequence for one grid.
pub fn sequence_positions(rows: usize, cols: usize) -> Vec<PositionTriple> {
    Role::CONDITION
        .into_iter()
        .chain([Role::QueryTarget])
        .flat_map(|role| grid_positions(rows, cols, role))
        .collect()
}

/// Per-head channel split over the (role, row, col) axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeSplit {
    pub role: usize,
    pub row: usize,
    pub col: usize,
}

impl RopeSplit {
    /// Default split for a head dimension: a quarter (at least 2) for the
    /// role axis, the rest shared between row and column. `16 -> (4, 6, 6)`.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim < 6 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("head dim {head_dim} too small or odd for a 3-axis split")));
        }
        let role = (head_dim / 4 / 2 * 2).max(2);
        let rest = head_dim - role;
        let row = rest / 4 * 2;
        Ok(Self {
            role,
            row,
            col: rest - row,
        })
    }

    pub fn total(&self) -> usize {
        self.role + self.row + self.col
    }

    fn dims(&self) -> [usize; 3] {
        [self.role, self.row, self.col]
    }
}

/// Rotary frequencies for the three axes.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    split: RopeSplit,
    base: f64,
    /// `(axis, frequency)` for every channel pair of a head.
    pair_freqs: Vec<(usize, f64)>,
}

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

impl RopeTable {
    pub fn new(split: RopeSplit, base: f64) -> Result<Self> {
        if split.dims().iter().any(|&d| d == 0 || d % 2 != 0) {
            return Err(Error::Config(format!("every rotary axis needs a positive even width: {split:?}")));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        let mut pair_freqs = Vec::with_capacity(split.total() / 2);
        for (axis, d) in split.dims().into_iter().enumerate() {
            for g in 0..d / 2 {
                pair_freqs.push((axis, base.powf(-2.0 * g as f64 / d as f64)));
            }
        }
        Ok(Self {
            split,
            base,
            pair_freqs,
        })
    }

    pub fn split(&self) -> RopeSplit {
        self.split
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn head_dim(&self) -> usize {
        self.split.total()
    }

    fn angles(&self, pos: PositionTriple) -> impl Iterator<Item = f64> + '_ {
        let axes = pos.axes();
        self.pair_freqs
            .iter()
            .map(move |&(axis, freq)| axes[axis] as f64 * freq)
    }

    /// Cosine/sine table over a sequence of positions, for the graph's
    /// pairwise rotation op.
    pub fn rotation_table<T: Real>(&self, positions: &[PositionTriple]) -> Arc<RotationTable<T>> {
        let pairs = self.pair_freqs.len();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &pos in positions {
            for angle in self.angles(pos) {
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Arc::new(RotationTable {
            period: positions.len(),
            pairs,
            cos,
            sin,
        })
    }
}

/// Rotates per-head vectors (`n x head_dim`, one per position) in place.
pub fn rope_rotate<T: Real>(vectors: &mut [T], positions: &[PositionTriple], table: &RopeTable) -> Result<()> {
    let hd = table.head_dim();
    if vectors.len() != positions.len() * hd {
        return Err(Error::Config(format!(
            "{} values do not form {} vectors of head dim {hd}",
            vectors.len(),
            positions.len()
        )));
    }
    for (v, &pos) in vectors.chunks_exact_mut(hd).zip(positions) {
        for (pair, angle) in v.chunks_exact_mut(2).zip(table.angles(pos)) {
            let (c, s) = (T::from_f64_lossy(angle.cos()), T::from_f64_lossy(angle.sin()));
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
    Ok(())
}
