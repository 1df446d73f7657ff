//! Synthetic images, client partitions, public subsets and the `FSFI` raw
//! image format.
//!
//! `FSFI` layout, little endian: magic `FSFI`, `u32` count, `u32` C, H, W,
//! then `count * C * H * W` pixels as `f32` in `[0, 1]`.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::model::ByteCursor;
use crate::rng::stream;

const RAW_MAGIC: &[u8; 4] = b"FSFI";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self { name: name.into(), images: indices.iter().map(|&i| self.images[i].clone()).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Gradients,
    Gaussians,
    Checker,
}

fn check_shape(shape: [usize; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(invalid(format!("image shape {shape:?} has a zero dimension")));
    }
    Ok(())
}

/// Deterministic synthetic images with pixels in `[0, 1]`.
///
/// `gradients`: random linear ramps; `gaussians`: sums of one to three 2-D
/// Gaussian blobs; `checker`: random-phase checkerboards.
pub fn generate_synthetic(n: usize, shape: [usize; 3], kind: SyntheticKind, seed: u64) -> Result<Dataset> {
    check_shape(shape)?;
    let label = match kind {
        SyntheticKind::Gradients => "gradients",
        SyntheticKind::Gaussians => "gaussians",
        SyntheticKind::Checker => "checker",
    };
    let images = (0..n)
        .map(|i| {
            let mut rng = stream(seed, "synthetic", &[i as u64, kind as u64]);
            let data = match kind {
                SyntheticKind::Gradients => ramp(shape, &mut rng),
                SyntheticKind::Gaussians => blobs(shape, &mut rng),
                SyntheticKind::Checker => checker(shape, &mut rng),
            };
            Tensor::new(shape.to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { name: label.into(), images })
}

fn coords(h: usize, w: usize) -> impl Iterator<Item = (f64, f64)> {
    let norm = |k: usize, n: usize| if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
    (0..h).flat_map(move |y| (0..w).map(move |x| (norm(x, w), norm(y, h))))
}

fn ramp(shape: [usize; 3], rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (lo, hi) = (rng.random_range(0.0..0.5), rng.random_range(0.5..1.0));
        let (dx, dy) = (angle.cos(), angle.sin());
        // Projection onto the direction spans at most [-sqrt 2, sqrt 2] / 2 around the center.
        let half = (dx.abs() + dy.abs()) / 2.0;
        for (x, y) in coords(h, w) {
            let p = (x - 0.5) * dx + (y - 0.5) * dy;
            let t = if half > 0.0 { (p / half + 1.0) / 2.0 } else { 0.5 };
            out.push((lo + (hi - lo) * t).clamp(0.0, 1.0));
        }
    }
    out
}

fn blobs(shape: [usize; 3], rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let count = rng.random_range(1..=3);
    let blobs: Vec<[f64; 4]> = (0..count)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random_range(0.1..0.4), rng.random_range(0.3..1.0)])
        .collect();
    let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.0)).collect();
    let mut out = Vec::with_capacity(c * h * w);
    for t in &tint {
        for (x, y) in coords(h, w) {
            let v: f64 = blobs
                .iter()
                .map(|[cx, cy, s, a]| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            out.push((t * v).clamp(0.0, 1.0));
        }
    }
    out
}

fn checker(shape: [usize; 3], rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let period = rng.random_range(1..=(h.max(w) / 2).max(1));
    let (px, py) = (rng.random_range(0..2 * period), rng.random_range(0..2 * period));
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let (lo, hi) = (rng.random_range(0.0..0.4), rng.random_range(0.6..1.0));
        for y in 0..h {
            for x in 0..w {
                let on = ((x + px) / period + (y + py) / period) % 2 == 0;
                out.push(if on { hi } else { lo });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    IidEqual,
    /// Sizes proportional to a symmetric Dirichlet(1) draw, at least one
    /// image per client.
    SizeSkewed,
}

/// Splits `dataset` into `k` disjoint client datasets covering it.
/// Returns the per-client index lists into `dataset`.
pub fn partition_indices(n: usize, k: usize, scheme: PartitionScheme, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(invalid("partition needs at least one client"));
    }
    let mut rng = stream(seed, "partition", &[]);
    let mut order: Vec<usize> = (0..n).collect();
    if k > 1 {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    }
    let sizes = match scheme {
        PartitionScheme::IidEqual => (0..k).map(|i| n / k + usize::from(i < n % k)).collect::<Vec<_>>(),
        PartitionScheme::SizeSkewed => {
            if n < k {
                return Err(invalid(format!("size-skewed partition of {n} images over {k} clients leaves a client empty")));
            }
            let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
            let w: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = w.iter().sum();
            let spare = (n - k) as f64;
            let ideal: Vec<f64> = w.iter().map(|x| x / total * spare).collect();
            let mut sizes: Vec<usize> = ideal.iter().map(|x| x.floor() as usize + 1).collect();
            let mut rest = n - sizes.iter().sum::<usize>();
            let mut by_remainder: Vec<usize> = (0..k).collect();
            by_remainder.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
            for &i in &by_remainder {
                if rest == 0 {
                    break;
                }
                sizes[i] += 1;
                rest -= 1;
            }
            sizes
        }
    };
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for s in sizes {
        let mut part = order[start..start + s].to_vec();
        part.sort_unstable();
        out.push(part);
        start += s;
    }
    Ok(out)
}

pub fn partition(dataset: &Dataset, k: usize, scheme: PartitionScheme, seed: u64) -> Result<Vec<Dataset>> {
    Ok(partition_indices(dataset.len(), k, scheme, seed)?
        .iter()
        .enumerate()
        .map(|(i, idx)| dataset.subset(format!("{}/client{i}", dataset.name), idx))
        .collect())
}

/// `ceil(fraction * len)` indices sampled without replacement, sorted.
pub fn mark_public(len: usize, fraction: f64, seed: u64, client: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("public fraction {fraction} outside (0, 1]")));
    }
    let count = crate::compression::kept_count(fraction, len);
    let mut rng = stream(seed, "public", &[client]);
    let mut idx = sample(&mut rng, len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn save_raw(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_raw(dataset, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn write_raw(dataset: &Dataset, w: &mut impl Write) -> Result<()> {
    let shape = match dataset.shape() {
        Some([c, h, ww]) => [*c, *h, *ww],
        Some(s) => return Err(invalid(format!("images must be C x H x W, got {s:?}"))),
        None => [0, 0, 0],
    };
    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| invalid("dimension exceeds u32"));
    w.write_all(RAW_MAGIC)?;
    w.write_all(&as_u32(dataset.len())?.to_le_bytes())?;
    for d in shape {
        w.write_all(&as_u32(d)?.to_le_bytes())?;
    }
    for img in &dataset.images {
        if img.shape() != shape {
            return Err(invalid("images of different shapes"));
        }
        for &p in img.data() {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("pixel {p} outside [0, 1]")));
            }
            w.write_all(&(p as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut ds = read_raw(&bytes)?;
    ds.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ds)
}

pub fn read_raw(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != RAW_MAGIC {
        return Err(Error::Format("bad magic, expected FSFI".into()));
    }
    let count = cur.u32()? as usize;
    let shape = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let len: usize = shape.iter().product();
    if count > 0 && len == 0 {
        return Err(Error::Format(format!("image shape {shape:?} has a zero dimension")));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let raw = cur.take(len * 4)?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            let p = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Format(format!("image {i}: pixel {p} outside [0, 1]")));
            }
            data.push(f64::from(p));
        }
        images.push(Tensor::new(shape.to_vec(), data)?);
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after the last image".into()));
    }
    Ok(Dataset { name: String::new(), images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_range_and_determinism() {
        for kind in [SyntheticKind::Gradients, SyntheticKind::Gaussians, SyntheticKind::Checker] {
            let a = generate_synthetic(20, [2, 8, 8], kind, 3).unwrap();
            assert_eq!(a, generate_synthetic(20, [2, 8, 8], kind, 3).unwrap());
            assert_ne!(a, generate_synthetic(20, [2, 8, 8], kind, 4).unwrap());
            assert!(a.images.iter().all(|t| t.data().iter().all(|p| (0.0..=1.0).contains(p))));
            assert!(a.images.iter().all(|t| t.data().iter().any(|&p| p != t.data()[0])));
        }
        assert!(generate_synthetic(0, [1, 8, 8], SyntheticKind::Checker, 0).unwrap().is_empty());
    }

    #[test]
    fn partition_examples() {
        let ds = generate_synthetic(10, [1, 2, 2], SyntheticKind::Gradients, 0).unwrap();
        let parts = partition(&ds, 3, PartitionScheme::IidEqual, 1).unwrap();
        let mut sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(partition(&ds, 1, PartitionScheme::IidEqual, 1).unwrap()[0].images, ds.images);
    }

    #[test]
    fn public_subsets() {
        assert_eq!(mark_public(7, 1.0, 0, 0).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(mark_public(7, 1e-9, 0, 0).unwrap().len(), 1);
        assert_eq!(mark_public(50, 0.3, 5, 2).unwrap(), mark_public(50, 0.3, 5, 2).unwrap());
        assert_eq!(mark_public(50, 0.3, 5, 2).unwrap().len(), 15);
    }

    #[test]
    fn raw_roundtrip_and_errors() {
        let ds = generate_synthetic(3, [1, 4, 4], SyntheticKind::Gaussians, 9).unwrap();
        let mut buf = Vec::new();
        write_raw(&ds, &mut buf).unwrap();
        let back = read_raw(&buf).unwrap();
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-7));
        }
        let mut again = Vec::new();
        write_raw(&back, &mut again).unwrap();
        assert_eq!(again, buf);

        assert!(matches!(read_raw(&buf[..buf.len() - 2]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_raw(&bad), Err(Error::Format(_))));
        let mut hot = buf.clone();
        hot[20..24].copy_from_slice(&1.5f32.to_le_bytes());
        let err = read_raw(&hot).unwrap_err().to_string();
        assert!(err.contains("outside [0, 1]"), "{err}");
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_covers(n in 0usize..80, k in 1usize..12, seed in 0u64..100, skew in any::<bool>()) {
            let scheme = if skew { PartitionScheme::SizeSkewed } else { PartitionScheme::IidEqual };
            match partition_indices(n, k, scheme, seed) {
                Ok(parts) => {
                    prop_assert_eq!(parts.len(), k);
                    let mut all: Vec<usize> = parts.concat();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                    if !skew {
                        let max = parts.iter().map(Vec::len).max().unwrap();
                        let min = parts.iter().map(Vec::len).min().unwrap();
                        prop_assert!(max - min <= 1);
                    } else {
                        prop_assert!(parts.iter().all(|p| !p.is_empty()));
                    }
                }
                Err(_) => prop_assert!(skew && n < k),
            }
        }

        #[test]
        fn public_is_subset(len in 1usize..100, frac in 0.001f64..=1.0, seed in 0u64..50) {
            let p = mark_public(len, frac, seed, 0).unwrap();
            prop_assert_eq!(p.len(), crate::compression::kept_count(frac, len));
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.iter().all(|&i| i < len));
        }
    }
}
