//! A small inference-only multi-exit classifier.
//!
//! The trunk is `k` affine+ReLU blocks; an affine head hangs off every block.
//! Exit `i` costs the trunk up to block `i` plus its own head.

use serde::{Deserialize, Serialize};

use crate::complexity::ImageBuffer;
use crate::error::{MoodError, Result};
use crate::scoring::LogitsRecord;

pub const NET_MAGIC: &[u8; 8] = b"MOODNET1";

/// Cumulative FLOPs of the five exits of the reference MSDNet, in FLOPs.
pub const REFERENCE_MSDNET_FLOPS: [f64; 5] = [0.267e8, 0.516e8, 0.689e8, 0.884e8, 1.051e8];

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MoodError::input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// `self * x + bias`
    fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .zip(bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub trunk: Matrix,
    pub trunk_bias: Vec<f64>,
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitNetWeights {
    dims: Vec<usize>,
    num_classes: usize,
    blocks: Vec<Block>,
}

impl ExitNetWeights {
    /// `dims` holds the `k + 1` layer widths, input width first.
    pub fn new(dims: Vec<usize>, num_classes: usize, blocks: Vec<Block>) -> Result<Self> {
        let k = blocks.len();
        if k == 0 {
            return Err(MoodError::input("network needs at least one block"));
        }
        if dims.len() != k + 1 {
            return Err(MoodError::input(format!(
                "expected {} layer widths for {k} blocks, got {}",
                k + 1,
                dims.len()
            )));
        }
        if dims.contains(&0) || num_classes == 0 {
            return Err(MoodError::input("layer widths and class count must be positive"));
        }
        for (i, b) in blocks.iter().enumerate() {
            let (d_in, d_out) = (dims[i], dims[i + 1]);
            let ok = b.trunk.rows == d_out
                && b.trunk.cols == d_in
                && b.trunk_bias.len() == d_out
                && b.head.rows == num_classes
                && b.head.cols == d_out
                && b.head_bias.len() == num_classes;
            if !ok {
                return Err(MoodError::input(format!(
                    "block {} shapes do not match widths {d_in}->{d_out} with {num_classes} classes",
                    i + 1
                )));
            }
            let finite = b
                .trunk
                .data
                .iter()
                .chain(&b.trunk_bias)
                .chain(&b.head.data)
                .chain(&b.head_bias)
                .all(|v| v.is_finite());
            if !finite {
                return Err(MoodError::input(format!(
                    "block {} has non-finite weights",
                    i + 1
                )));
            }
        }
        Ok(Self {
            dims,
            num_classes,
            blocks,
        })
    }

    /// All-zero network with the given widths.
    pub fn zeros(dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dims.len() < 2 {
            return Err(MoodError::input("need at least two layer widths"));
        }
        let blocks = dims
            .windows(2)
            .map(|w| Block {
                trunk: Matrix::zeros(w[1], w[0]),
                trunk_bias: vec![0.0; w[1]],
                head: Matrix::zeros(num_classes, w[1]),
                head_bias: vec![0.0; num_classes],
            })
            .collect();
        Self::new(dims, num_classes, blocks)
    }

    pub fn num_exits(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    /// Logits of every exit for a raw input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.input_width() {
            return Err(MoodError::input(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_width()
            )));
        }
        let mut hidden = input.to_vec();
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            hidden = block.trunk.affine(&hidden, &block.trunk_bias);
            hidden.iter_mut().for_each(|v| *v = v.max(0.0));
            out.push(block.head.affine(&hidden, &block.head_bias));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for b in &self.blocks {
            for v in b
                .trunk
                .data
                .iter()
                .chain(&b.trunk_bias)
                .chain(&b.head.data)
                .chain(&b.head_bias)
            {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a MOODNET1 stream. Errors carry a short reason.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, NetFormatError> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(8, "magic")? != NET_MAGIC {
            return Err(NetFormatError::BadMagic);
        }
        let k = cur.u32("k")? as usize;
        let c = cur.u32("num_classes")? as usize;
        let mut dims = Vec::new();
        for _ in 0..=k {
            dims.push(cur.u32("dims")? as usize);
        }
        let mut blocks = Vec::new();
        for i in 0..k {
            let (d_in, d_out) = (dims[i], dims[i + 1]);
            let trunk = cur.f64s(d_out.saturating_mul(d_in), "trunk matrix")?;
            let trunk_bias = cur.f64s(d_out, "trunk bias")?;
            let head = cur.f64s(c.saturating_mul(d_out), "head matrix")?;
            let head_bias = cur.f64s(c, "head bias")?;
            blocks.push(Block {
                trunk: Matrix::new(d_out, d_in, trunk).expect("sized by reader"),
                trunk_bias,
                head: Matrix::new(c, d_out, head).expect("sized by reader"),
                head_bias,
            });
        }
        if cur.pos != bytes.len() {
            return Err(NetFormatError::Invalid(format!(
                "{} trailing bytes after weights",
                bytes.len() - cur.pos
            )));
        }
        Self::new(dims, c, blocks).map_err(|e| NetFormatError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetFormatError {
    BadMagic,
    Truncated(&'static str),
    Invalid(String),
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], NetFormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(NetFormatError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, NetFormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> std::result::Result<Vec<f64>, NetFormatError> {
        let len = n.checked_mul(8).ok_or(NetFormatError::Truncated(what))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Flattens pixels and scales them to `[0, 1]`.
pub fn image_to_input(img: &ImageBuffer) -> Vec<f64> {
    img.pixels().iter().map(|&p| f64::from(p) / 255.0).collect()
}

/// Runs the network on one image and packages every exit's logits.
pub fn forward_all_exits(
    weights: &ExitNetWeights,
    sample_id: impl Into<String>,
    img: &ImageBuffer,
) -> Result<LogitsRecord> {
    let logits = weights.forward(&image_to_input(img))?;
    Ok(LogitsRecord {
        sample_id: sample_id.into(),
        label: None,
        logits,
    })
}

/// Cumulative cost of stopping at each exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostModelFile", into = "CostModelFile")]
pub struct ExitCostModel {
    cumulative_flops: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostModelFile {
    k: usize,
    cumulative_flops: Vec<f64>,
}

impl TryFrom<CostModelFile> for ExitCostModel {
    type Error = MoodError;

    fn try_from(f: CostModelFile) -> Result<Self> {
        if f.k != f.cumulative_flops.len() {
            return Err(MoodError::input(format!(
                "cost model declares k = {} but lists {} costs",
                f.k,
                f.cumulative_flops.len()
            )));
        }
        ExitCostModel::new(f.cumulative_flops)
    }
}

impl From<ExitCostModel> for CostModelFile {
    fn from(m: ExitCostModel) -> Self {
        CostModelFile {
            k: m.cumulative_flops.len(),
            cumulative_flops: m.cumulative_flops,
        }
    }
}

impl ExitCostModel {
    pub fn new(cumulative_flops: Vec<f64>) -> Result<Self> {
        if cumulative_flops.is_empty() {
            return Err(MoodError::input("cost model needs at least one exit"));
        }
        if cumulative_flops.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(MoodError::input("costs must be finite and non-negative"));
        }
        if cumulative_flops.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MoodError::input("cumulative costs must be strictly increasing"));
        }
        Ok(Self { cumulative_flops })
    }

    /// Per-exit cost of the five-exit reference MSDNet.
    pub fn reference_msdnet() -> Self {
        Self::new(REFERENCE_MSDNET_FLOPS.to_vec()).expect("increasing constants")
    }

    pub fn num_exits(&self) -> usize {
        self.cumulative_flops.len()
    }

    pub fn cumulative_flops(&self) -> &[f64] {
        &self.cumulative_flops
    }

    /// Cost of a 1-based exit.
    pub fn cost(&self, exit: usize) -> Result<f64> {
        if exit == 0 || exit > self.cumulative_flops.len() {
            return Err(MoodError::input(format!(
                "exit {exit} out of range 1..={}",
                self.cumulative_flops.len()
            )));
        }
        Ok(self.cumulative_flops[exit - 1])
    }
}

/// Counts 2 FLOPs per multiply-accumulate for the trunk up to each exit plus
/// that exit's head.
///
/// Fails when the widths make a deeper exit no more expensive than an earlier
/// one (a wide early layer with a large head followed by narrow layers).
pub fn analytic_cost_model(weights: &ExitNetWeights) -> Result<ExitCostModel> {
    let dims = weights.dims();
    let c = weights.num_classes() as f64;
    let mut trunk = 0.0;
    let costs = (1..dims.len())
        .map(|i| {
            trunk += 2.0 * dims[i] as f64 * dims[i - 1] as f64;
            trunk + 2.0 * c * dims[i] as f64
        })
        .collect();
    ExitCostModel::new(costs).map_err(|_| {
        MoodError::input(format!(
            "layer widths {dims:?} with {} classes do not give strictly increasing exit costs",
            weights.num_classes()
        ))
    })
}
