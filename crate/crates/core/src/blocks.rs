//! Mamba block variants: bidirectional over a 1D sequence, four-directional
//! over a 2D feature map, and the dual-input fusion block.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::ssm::{fssm_block_ordered, ssm_block, Interaction, SsmWeights};
use crate::tensor::{hwc, Scalar, Tensor};

/// Scan order used to serialize an `[H, W, C]` map into `[H*W, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Row-major from the top-left corner.
    RowMajor = 1,
    /// Reverse of `RowMajor`.
    RowMajorReversed = 2,
    /// Column-major from the top-left corner.
    ColMajor = 3,
    /// Reverse of `ColMajor`.
    ColMajorReversed = 4,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowMajor,
        Direction::RowMajorReversed,
        Direction::ColMajor,
        Direction::ColMajorReversed,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.id() == id)
    }

    /// `order[i]` is the row-major pixel index visited at sequence position `i`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
        match self {
            Direction::RowMajor => row,
            Direction::RowMajorReversed => row.into_iter().rev().collect(),
            Direction::ColMajor => col,
            Direction::ColMajorReversed => col.into_iter().rev().collect(),
        }
    }

    /// `inverse[p]` is the sequence position holding pixel `p`.
    pub fn inverse_order(self, h: usize, w: usize) -> Vec<usize> {
        let order = self.order(h, w);
        let mut inv = vec![0; order.len()];
        for (i, &p) in order.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

/// `[H, W, C] -> [H*W, C]` in the given scan order.
pub fn flatten<T: Scalar>(x: &Tensor<T>, dir: Direction) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x.shape(), "flatten")?;
    let src = x.data();
    let data = dir
        .order(h, w)
        .into_iter()
        .flat_map(|p| src[p * c..(p + 1) * c].iter().copied())
        .collect();
    Tensor::from_vec(&[h * w, c], data)
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar>(y: &Tensor<T>, dir: Direction, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = match *y.shape() {
        [l, c] if l == h * w => c,
        _ => return Err(Error::dim("unflatten", y.shape(), &[h * w, 0])),
    };
    let src = y.data();
    let data = dir
        .inverse_order(h, w)
        .into_iter()
        .flat_map(|i| src[i * c..(i + 1) * c].iter().copied())
        .collect();
    Tensor::from_vec(&[h, w, c], data)
}

/// Row visiting order of a scan in `dir`; `None` when it is the storage order.
fn scan_order(dir: Direction, h: usize, w: usize) -> Option<Arc<Vec<usize>>> {
    match dir {
        Direction::RowMajor => None,
        d => Some(Arc::new(d.order(h, w))),
    }
}

#[cfg(test)]
fn flatten_var<T: Scalar>(g: &mut Graph<'_, T>, x: Var, dir: Direction) -> Result<Var> {
    let (h, w, c) = hwc(g.shape(x), "flatten")?;
    g.gather_rows(x, &dir.order(h, w), &[h * w, c])
}

#[cfg(test)]
fn unflatten_var<T: Scalar>(g: &mut Graph<'_, T>, y: Var, dir: Direction, h: usize, w: usize) -> Result<Var> {
    let c = g.value(y).last_dim();
    g.gather_rows(y, &dir.inverse_order(h, w), &[h, w, c])
}

fn flip_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rows: Vec<usize> = (0..shape[0]).rev().collect();
    g.gather_rows(x, &rows, &shape)
}

fn sum_in_order<T: Scalar>(g: &mut Graph<'_, T>, parts: Vec<Var>) -> Result<Var> {
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Usage("no scan lanes configured".into()))?;
    for p in it {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Bidirectional Mamba over an `[L, C]` sequence.
#[derive(Clone, Debug)]
pub struct BiMambaWeights {
    pub norm: LayerNorm,
    pub w_x: Linear,
    pub w_z: Linear,
    pub ssm_fwd: SsmWeights,
    pub ssm_bwd: SsmWeights,
    pub w_o: Linear,
}

impl BiMambaWeights {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), c)?,
            w_x: Linear::init(store, &format!("{prefix}.w_x"), c, c, true, rng)?,
            w_z: Linear::init(store, &format!("{prefix}.w_z"), c, c, true, rng)?,
            ssm_fwd: SsmWeights::init(store, &format!("{prefix}.ssm_fwd"), c, n, rng)?,
            ssm_bwd: SsmWeights::init(store, &format!("{prefix}.ssm_bwd"), c, n, rng)?,
            w_o: Linear::init(store, &format!("{prefix}.w_o"), c, c, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x_in: Var) -> Result<Var> {
        match *g.shape(x_in) {
            [_, c] if c == self.w_x.cin => {}
            _ => return Err(Error::dim("bidirectional_mamba", g.shape(x_in), &[0, self.w_x.cin])),
        }
        let n = self.norm.forward(g, x_in)?;
        let x = self.w_x.forward(g, n)?;
        let z = self.w_z.forward(g, n)?;
        let y_fwd = ssm_block(g, x, &self.ssm_fwd)?;
        let x_rev = flip_rows(g, x)?;
        let y_rev = ssm_block(g, x_rev, &self.ssm_bwd)?;
        let y_back = flip_rows(g, y_rev)?;
        let y = g.add(y_fwd, y_back)?;
        let gate = g.silu(z)?;
        let gated = g.mul(y, gate)?;
        let out = self.w_o.forward(g, gated)?;
        g.add(out, x_in)
    }

    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.w_o.zero(store);
    }
}

/// Four-directional Mamba over an `[H, W, C]` map.
#[derive(Clone, Debug)]
pub struct FourDirMambaWeights {
    pub norm: LayerNorm,
    pub conv_x: Linear,
    pub conv_z: Linear,
    /// One independent SSM per scan direction, summed in this order.
    pub lanes: Vec<(Direction, SsmWeights)>,
    pub conv_o: Linear,
}

impl FourDirMambaWeights {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with(store, prefix, c, n, &Direction::ALL, rng)
    }

    /// Restricts the scan to a subset of directions (ablation configurations).
    pub fn init_with<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        n: usize,
        dirs: &[Direction],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm = LayerNorm::init(store, &format!("{prefix}.norm"), c)?;
        let conv_x = Linear::init(store, &format!("{prefix}.conv_x"), c, c, true, rng)?;
        let conv_z = Linear::init(store, &format!("{prefix}.conv_z"), c, c, true, rng)?;
        let lanes = dirs
            .iter()
            .map(|&d| Ok((d, SsmWeights::init(store, &format!("{prefix}.ssm_{}", d.id()), c, n, rng)?)))
            .collect::<Result<_>>()?;
        let conv_o = Linear::init(store, &format!("{prefix}.conv_o"), c, c, true, rng)?;
        Ok(Self { norm, conv_x, conv_z, lanes, conv_o })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_in: Var) -> Result<Var> {
        let (h, w, c) = hwc(g.shape(f_in), "four_directional_mamba")?;
        if c != self.conv_x.cin {
            return Err(Error::dim("four_directional_mamba", g.shape(f_in), &[h, w, self.conv_x.cin]));
        }
        let n = self.norm.forward(g, f_in)?;
        let x = self.conv_x.forward(g, n)?;
        let z = self.conv_z.forward(g, n)?;
        let seq = g.reshape(x, &[h * w, c])?;
        let mut parts = Vec::with_capacity(self.lanes.len());
        for (dir, ssm) in &self.lanes {
            parts.push(fssm_block_ordered(g, seq, seq, ssm, Interaction::FULL, scan_order(*dir, h, w))?);
        }
        let y = sum_in_order(g, parts)?;
        let y = g.reshape(y, &[h, w, c])?;
        let gate = g.silu(z)?;
        let gated = g.mul(y, gate)?;
        let out = self.conv_o.forward(g, gated)?;
        g.add(out, f_in)
    }

    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.conv_o.zero(store);
    }
}

/// One half of the fusion block.
#[derive(Clone, Debug)]
pub struct FusionLane {
    pub norm: LayerNorm,
    pub conv_x: Linear,
    pub conv_z: Linear,
    pub fssm: Vec<(Direction, SsmWeights)>,
    pub conv_o: Linear,
}

impl FusionLane {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        n: usize,
        dirs: &[Direction],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm = LayerNorm::init(store, &format!("{prefix}.norm"), c)?;
        let conv_x = Linear::init(store, &format!("{prefix}.conv_x"), c, c, true, rng)?;
        let conv_z = Linear::init(store, &format!("{prefix}.conv_z"), c, c, true, rng)?;
        let fssm = dirs
            .iter()
            .map(|&d| Ok((d, SsmWeights::init(store, &format!("{prefix}.fssm_{}", d.id()), c, n, rng)?)))
            .collect::<Result<_>>()?;
        let conv_o = Linear::init(store, &format!("{prefix}.conv_o"), c, c, true, rng)?;
        Ok(Self { norm, conv_x, conv_z, fssm, conv_o })
    }
}

/// Outputs of the fusion block.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutputs {
    pub fused: Var,
    pub out_a: Var,
    pub out_b: Var,
}

/// Dual-input fusion block with symmetric `a` and `b` halves.
#[derive(Clone, Debug)]
pub struct FusionMambaWeights {
    pub a: FusionLane,
    pub b: FusionLane,
    pub conv_o: Linear,
    pub interaction: Interaction,
}

impl FusionMambaWeights {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with(store, prefix, c, n, &Direction::ALL, rng)
    }

    pub fn init_with<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        n: usize,
        dirs: &[Direction],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            a: FusionLane::init(store, &format!("{prefix}.a"), c, n, dirs, rng)?,
            b: FusionLane::init(store, &format!("{prefix}.b"), c, n, dirs, rng)?,
            conv_o: Linear::init(store, &format!("{prefix}.conv_o"), c, c, true, rng)?,
            interaction: Interaction::FULL,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_a: Var, f_b: Var) -> Result<FusionOutputs> {
        if g.shape(f_a) != g.shape(f_b) {
            return Err(Error::dim("fusion_mamba_block", g.shape(f_a), g.shape(f_b)));
        }
        let (h, w, c) = hwc(g.shape(f_a), "fusion_mamba_block")?;
        if c != self.a.conv_x.cin {
            return Err(Error::dim("fusion_mamba_block", g.shape(f_a), &[h, w, self.a.conv_x.cin]));
        }
        let na = self.a.norm.forward(g, f_a)?;
        let xa = self.a.conv_x.forward(g, na)?;
        let za = self.a.conv_z.forward(g, na)?;
        let nb = self.b.norm.forward(g, f_b)?;
        let xb = self.b.conv_x.forward(g, nb)?;
        let zb = self.b.conv_z.forward(g, nb)?;

        let mut parts_a = Vec::with_capacity(self.a.fssm.len());
        let mut parts_b = Vec::with_capacity(self.b.fssm.len());
        let sa = g.reshape(xa, &[h * w, c])?;
        let sb = g.reshape(xb, &[h * w, c])?;
        for ((dir, wa), (dir_b, wb)) in self.a.fssm.iter().zip(&self.b.fssm) {
            debug_assert_eq!(dir, dir_b);
            let order = scan_order(*dir, h, w);
            parts_a.push(fssm_block_ordered(g, sa, sb, wa, self.interaction, order.clone())?);
            parts_b.push(fssm_block_ordered(g, sb, sa, wb, self.interaction, order)?);
        }
        let out_a = lane_output(g, &self.a, parts_a, za, f_a)?;
        let out_b = lane_output(g, &self.b, parts_b, zb, f_b)?;
        let merged = g.add(out_a, out_b)?;
        let fused = self.conv_o.forward(g, merged)?;
        Ok(FusionOutputs { fused, out_a, out_b })
    }

    /// Zeroes both lane output projections.
    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.a.conv_o.zero(store);
        self.b.conv_o.zero(store);
    }
}

fn lane_output<T: Scalar>(g: &mut Graph<'_, T>, lane: &FusionLane, parts: Vec<Var>, z: Var, residual: Var) -> Result<Var> {
    let y = sum_in_order(g, parts)?;
    let y = g.reshape(y, g.shape(residual).to_vec().as_slice())?;
    let gate = g.silu(z)?;
    let gated = g.mul(y, gate)?;
    let out = lane.conv_o.forward(g, gated)?;
    g.add(out, residual)
}
