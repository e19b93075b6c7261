//! Synthetic images and a hand-built exit network shared by the CLI tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mood_core::exitnet::{Block, ExitNetWeights, Matrix};
use mood_core::ImageBuffer;
use rand::rngs::StdRng;
use rand::Rng;

pub const SIDE: u16 = 32;
pub const CHANNELS: u8 = 3;
pub const PAIRS: usize = 64;
pub const HIDDEN: usize = 2 * PAIRS;
pub const EXITS: usize = 5;
pub const CLASSES: usize = 10;

pub fn constant(rng: &mut StdRng) -> ImageBuffer {
    let color: [u8; 3] = rng.random();
    let pixels = (0..SIDE as usize * SIDE as usize)
        .flat_map(|_| color)
        .collect();
    ImageBuffer::new(SIDE, SIDE, CHANNELS, pixels).unwrap()
}

/// Linear ramp with a random slope per channel.
pub fn gradient(rng: &mut StdRng) -> ImageBuffer {
    let mut pixels = Vec::with_capacity(SIDE as usize * SIDE as usize * 3);
    let params: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..60.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
            )
        })
        .collect();
    for y in 0..SIDE as usize {
        for x in 0..SIDE as usize {
            for &(base, sx, sy) in &params {
                let v = base + sx * x as f64 + sy * y as f64;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(SIDE, SIDE, CHANNELS, pixels).unwrap()
}

pub fn noise(rng: &mut StdRng) -> ImageBuffer {
    let mut pixels = vec![0u8; SIDE as usize * SIDE as usize * 3];
    rng.fill(&mut pixels[..]);
    ImageBuffer::new(SIDE, SIDE, CHANNELS, pixels).unwrap()
}

/// Channel-0 input indices of the horizontally adjacent pixel pairs probed
/// by the first block.
fn probe_pairs() -> Vec<(usize, usize)> {
    let w = SIDE as usize;
    (0..PAIRS)
        .map(|p| {
            let y = (p * 7) % w;
            let x = (p * 5) % (w - 1);
            let a = (y * w + x) * CHANNELS as usize;
            (a, a + CHANNELS as usize)
        })
        .collect()
}

/// Five exits. Block 1 measures local roughness S as the summed absolute
/// difference over the probe pairs; later blocks pass it through. Every
/// head emits `bias_j - beta_i * S`, so smooth inputs get low energy.
pub fn roughness_net() -> ExitNetWeights {
    let input = SIDE as usize * SIDE as usize * CHANNELS as usize;
    let mut first = Matrix::zeros(HIDDEN, input);
    for (p, (a, b)) in probe_pairs().into_iter().enumerate() {
        first.set(2 * p, a, 1.0);
        first.set(2 * p, b, -1.0);
        first.set(2 * p + 1, a, -1.0);
        first.set(2 * p + 1, b, 1.0);
    }
    let mut identity = Matrix::zeros(HIDDEN, HIDDEN);
    for i in 0..HIDDEN {
        identity.set(i, i, 1.0);
    }
    let blocks = (0..EXITS)
        .map(|i| {
            let beta = 1.0 + 0.1 * i as f64;
            let head = Matrix::new(CLASSES, HIDDEN, vec![-beta; CLASSES * HIDDEN]).unwrap();
            let mut head_bias = vec![0.0; CLASSES];
            head_bias[i % CLASSES] = 2.0 + 0.5 * i as f64;
            Block {
                trunk: if i == 0 { first.clone() } else { identity.clone() },
                trunk_bias: vec![0.0; HIDDEN],
                head,
                head_bias,
            }
        })
        .collect();
    let mut dims = vec![input];
    dims.extend([HIDDEN; EXITS]);
    ExitNetWeights::new(dims, CLASSES, blocks).unwrap()
}

pub fn mood() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mood"))
}

/// Runs the CLI and fails with its stderr unless it exits 0.
pub fn run_ok(args: &[&str]) -> Output {
    let out = mood().args(args).output().expect("spawn mood");
    assert!(
        out.status.success(),
        "mood {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub struct Workload {
    pub dir: PathBuf,
    pub weights: PathBuf,
    pub id_images: PathBuf,
    pub ood_images: PathBuf,
}

/// Writes `n_id` smooth images (one gradient in five) and `n_ood` noise
/// images plus the roughness net into `dir`.
pub fn write_workload(dir: &Path, n_id: usize, n_ood: usize, rng: &mut StdRng) -> Workload {
    let id: Vec<ImageBuffer> = (0..n_id)
        .map(|i| if i % 5 == 4 { gradient(rng) } else { constant(rng) })
        .collect();
    let ood: Vec<ImageBuffer> = (0..n_ood).map(|_| noise(rng)).collect();
    let w = Workload {
        dir: dir.to_path_buf(),
        weights: dir.join("net.bin"),
        id_images: dir.join("id.img"),
        ood_images: dir.join("noise.img"),
    };
    mood_core::datastore::write_images(&w.id_images, &id).unwrap();
    mood_core::datastore::write_images(&w.ood_images, &ood).unwrap();
    mood_core::datastore::write_weights(&roughness_net(), &w.weights).unwrap();
    w
}
