//! Bags of tile features: the MIL unit of work, its file formats, and the
//! seeded synthetic generators that stand in for slide datasets.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BAG_MAGIC: &[u8; 4] = b"SLBG";
const BAG_VERSION: u32 = 1;

/// Task label attached to a bag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BagLabel {
    Class(usize),
    Survival { time_months: f64, event: bool },
}

/// One slide's tile feature vectors plus integer grid coordinates.
#[derive(Debug, Clone)]
pub struct TileBag {
    pub features: Tensor,
    pub coords: Vec<(i64, i64)>,
    pub label: BagLabel,
}

impl TileBag {
    pub fn new(features: Tensor, coords: Vec<(i64, i64)>, label: BagLabel) -> Result<Self> {
        let (n, _d) = features.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        if coords.len() != n {
            return Err(Error::shape("tile_bag", format!("{n} feature rows, {} coords", coords.len())));
        }
        let mut seen = HashSet::with_capacity(n);
        for &c in &coords {
            if !seen.insert(c) {
                return Err(Error::Usage(format!("duplicate tile coordinate {c:?}")));
            }
        }
        Ok(TileBag { features, coords, label })
    }

    pub fn num_tiles(&self) -> usize {
        self.coords.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

// ── bag files ────────────────────────────────────────────────────────
//
// Binary layout (little-endian):
//   magic "SLBG", version u32, dim u32, count u64,
//   label kind u8 (0 none / 1 class / 2 survival) + payload,
//   then count records of { x: i64, y: i64, feature: f32[dim] }.

pub fn write_bag(path: &Path, bag: &TileBag) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BAG_MAGIC)?;
    w.write_all(&BAG_VERSION.to_le_bytes())?;
    w.write_all(&(bag.feature_dim() as u32).to_le_bytes())?;
    w.write_all(&(bag.num_tiles() as u64).to_le_bytes())?;
    match bag.label {
        BagLabel::Class(c) => {
            w.write_all(&[1u8])?;
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        BagLabel::Survival { time_months, event } => {
            w.write_all(&[2u8])?;
            w.write_all(&time_months.to_le_bytes())?;
            w.write_all(&[event as u8])?;
        }
    }
    let d = bag.feature_dim();
    for (i, &(x, y)) in bag.coords.iter().enumerate() {
        w.write_all(&x.to_le_bytes())?;
        w.write_all(&y.to_le_bytes())?;
        for &v in &bag.features.data()[i * d..(i + 1) * d] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_bag(path: &Path) -> Result<TileBag> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BAG_MAGIC {
        return Err(Error::Format("not a bag file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != BAG_VERSION {
        return Err(Error::Format(format!("unsupported bag version {version}")));
    }
    let d = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let label = match kind[0] {
        1 => BagLabel::Class(read_u32(&mut r)? as usize),
        2 => {
            let mut tb = [0u8; 8];
            r.read_exact(&mut tb)?;
            let mut eb = [0u8; 1];
            r.read_exact(&mut eb)?;
            BagLabel::Survival { time_months: f64::from_le_bytes(tb), event: eb[0] != 0 }
        }
        0 => BagLabel::Class(0),
        other => return Err(Error::Format(format!("unknown label kind {other}"))),
    };
    let mut coords = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut i8buf = [0u8; 8];
    let mut f4buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut i8buf)?;
        let x = i64::from_le_bytes(i8buf);
        r.read_exact(&mut i8buf)?;
        let y = i64::from_le_bytes(i8buf);
        coords.push((x, y));
        for _ in 0..d {
            r.read_exact(&mut f4buf)?;
            data.push(f32::from_le_bytes(f4buf) as f64);
        }
    }
    TileBag::new(Tensor::new(vec![n, d], data)?, coords, label)
}

/// Debug CSV form, `x,y,f0..f{D-1}` per line. Only sensible for small D.
pub fn write_bag_csv(path: &Path, bag: &TileBag) -> Result<()> {
    let d = bag.feature_dim();
    if d > 64 {
        return Err(Error::Usage(format!("CSV bag export capped at 64 dims, got {d}")));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "x,y")?;
    for j in 0..d {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (i, &(x, y)) in bag.coords.iter().enumerate() {
        write!(w, "{x},{y}")?;
        for &v in &bag.features.data()[i * d..(i + 1) * d] {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bag_csv(path: &Path, label: BagLabel) -> Result<TileBag> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let d = header.split(',').count().saturating_sub(2);
    if d == 0 {
        return Err(Error::Format("CSV bag needs x,y,f0.. columns".into()));
    }
    let mut coords = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::Format(format!("short row at line {}", ln + 2)))?
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))
        };
        let x = parse(fields.next())? as i64;
        let y = parse(fields.next())? as i64;
        coords.push((x, y));
        for _ in 0..d {
            data.push(parse(fields.next())?);
        }
    }
    let n = coords.len();
    TileBag::new(Tensor::new(vec![n, d], data)?, coords, label)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

// ── synthetic generation ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Survival,
}

/// Recipe for a seeded synthetic dataset: tissue masks are random blobs on
/// a square grid, labels come from a planted contiguous region (class
/// tasks) or a planted risk field (survival).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Side of the square tile grid.
    pub grid: usize,
    /// Feature dimension.
    pub dim: usize,
    pub task: TaskKind,
    pub num_classes: usize,
    /// Standard deviation of the per-tile Gaussian noise.
    pub noise: f64,
    /// Signal amplitude relative to `noise` for planted tiles.
    pub snr: f64,
    /// Planted region size as a fraction of the bag's tiles.
    pub planted_frac: f64,
    /// Disc radius range for the tissue blob generator.
    pub blob_radius: (usize, usize),
    /// Number of discs unioned into a tissue mask.
    pub blobs: usize,
    /// Probability that a survival sample is censored.
    pub censor_rate: f64,
    /// Amplitude of smooth, spatially correlated background fields. Zero
    /// gives pure i.i.d. noise; positive values make tile features vary
    /// coherently across the grid, so sequence orderings that keep spatial
    /// neighbors adjacent carry real information.
    pub spatial_noise: f64,
    /// Clustered-versus-dispersed variant: negative bags receive the same
    /// number of signal tiles as positives, scattered over the mask instead
    /// of contiguous. Bag-mean features then match in expectation and only
    /// the spatial arrangement separates the classes.
    pub scattered_negatives: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            grid: 64,
            dim: 64,
            task: TaskKind::Classification,
            num_classes: 2,
            noise: 1.0,
            snr: 2.0,
            planted_frac: 0.15,
            blob_radius: (5, 9),
            blobs: 2,
            censor_rate: 0.3,
            spatial_noise: 0.0,
            scattered_negatives: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::Config("grid side must be >= 4".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.planted_frac) {
            return Err(Error::Config("planted_frac must lie in [0, 1]".into()));
        }
        if self.blob_radius.0 == 0 || self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::Config("blob radius range is empty".into()));
        }
        if self.task == TaskKind::Classification && self.num_classes < 2 {
            return Err(Error::Config("classification needs >= 2 classes".into()));
        }
        Ok(())
    }

    /// Unit signal direction for class `c` (class 0 is background-only and
    /// has no direction). Deterministic in the dataset seed.
    pub fn signal_direction(&self, c: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5194_0000 ^ c as u64);
        let mut v: Vec<f64> = (0..self.dim).map(|_| gaussian(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

/// Generate one bag. `bag_index` selects the per-bag random stream, so a
/// `(spec, bag_index)` pair is fully reproducible.
pub fn generate_bag(spec: &SyntheticSpec, bag_index: u64) -> Result<TileBag> {
    generate_bag_detailed(spec, bag_index).map(|(bag, _)| bag)
}

/// Like [`generate_bag`], additionally returning the planted region (empty
/// for negative bags). Used by evaluation oracles.
pub fn generate_bag_detailed(
    spec: &SyntheticSpec,
    bag_index: u64,
) -> Result<(TileBag, HashSet<(i64, i64)>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(bag_index.wrapping_add(1));

    let mask = tissue_mask(spec, &mut rng);
    let n = mask.len();

    match spec.task {
        TaskKind::Classification => {
            let class = rng.gen_range(0..spec.num_classes);
            let want = ((n as f64 * spec.planted_frac).round() as usize).max(1);
            let planted = if class > 0 {
                plant_region(&mask, want, &mut rng)?
            } else if spec.scattered_negatives {
                scatter_tiles(&mask, want, &mut rng)
            } else {
                HashSet::new()
            };
            let dir = if planted.is_empty() {
                vec![0.0; spec.dim]
            } else if spec.scattered_negatives {
                // Same direction for both classes: geometry is the label.
                spec.signal_direction(1)
            } else {
                spec.signal_direction(class)
            };
            let features = fill_features(spec, &mask, &planted, &dir, &mut rng);
            Ok((TileBag::new(features, mask, BagLabel::Class(class))?, planted))
        }
        TaskKind::Survival => {
            // Risk is the planted fraction itself; higher fraction, shorter
            // survival. Fraction varies per bag so risks are spread out.
            let frac = rng.gen_range(0.02..0.5);
            let want = ((n as f64 * frac).round() as usize).max(1);
            let planted = plant_region(&mask, want, &mut rng)?;
            let risk = planted.len() as f64 / n as f64;
            let dir = spec.signal_direction(1);
            let features = fill_features(spec, &mask, &planted, &dir, &mut rng);
            let base_time = 120.0 * (-2.5 * risk).exp() * (0.1 * gaussian(&mut rng)).exp();
            let censored = rng.gen_bool(spec.censor_rate.clamp(0.0, 1.0));
            let time = if censored { base_time * rng.gen_range(0.2..0.9) } else { base_time };
            let bag =
                TileBag::new(features, mask, BagLabel::Survival { time_months: time, event: !censored })?;
            Ok((bag, planted))
        }
    }
}

pub fn generate_dataset(spec: &SyntheticSpec, n_bags: usize) -> Result<Vec<TileBag>> {
    (0..n_bags as u64).map(|i| generate_bag(spec, i)).collect()
}

/// Union of random discs, clipped to the grid. Returns unique coordinates.
fn tissue_mask(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(i64, i64)> {
    let g = spec.grid as i64;
    let mut cells = HashSet::new();
    for _ in 0..spec.blobs.max(1) {
        let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1) as i64;
        let r = r.min(g / 2 - 1).max(1);
        let cx = rng.gen_range(r..(g - r).max(r + 1));
        let cy = rng.gen_range(r..(g - r).max(r + 1));
        for dx in -r..=r {
            for dy in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    let (x, y) = (cx + dx, cy + dy);
                    if (0..g).contains(&x) && (0..g).contains(&y) {
                        cells.insert((x, y));
                    }
                }
            }
        }
    }
    let mut out: Vec<_> = cells.into_iter().collect();
    out.sort_unstable();
    out
}

/// Contiguous sub-region of the mask grown by BFS from a random seed tile.
/// Always returns exactly `want` tiles: if the connected component runs
/// out, the region is topped up with the nearest remaining mask tiles so
/// planted counts stay comparable across bags.
fn plant_region(mask: &[(i64, i64)], want: usize, rng: &mut ChaCha8Rng) -> Result<HashSet<(i64, i64)>> {
    if want > mask.len() {
        return Err(Error::Config(format!(
            "planted region of {want} tiles exceeds tissue mask of {}",
            mask.len()
        )));
    }
    let mask_set: HashSet<_> = mask.iter().cloned().collect();
    let start = mask[rng.gen_range(0..mask.len())];
    let mut region = HashSet::with_capacity(want);
    let mut frontier = vec![start];
    region.insert(start);
    while region.len() < want {
        let Some(cell) = frontier.pop() else { break };
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let nb = (cell.0 + dx, cell.1 + dy);
            if region.len() < want && mask_set.contains(&nb) && region.insert(nb) {
                frontier.insert(0, nb);
            }
        }
    }
    if region.len() < want {
        let mut rest: Vec<_> = mask.iter().filter(|c| !region.contains(c)).cloned().collect();
        rest.sort_by_key(|c| ((c.0 - start.0).abs() + (c.1 - start.1).abs(), *c));
        for c in rest.into_iter().take(want - region.len()) {
            region.insert(c);
        }
    }
    Ok(region)
}

/// `want` tiles sampled uniformly over the mask, no adjacency constraint.
fn scatter_tiles(mask: &[(i64, i64)], want: usize, rng: &mut ChaCha8Rng) -> HashSet<(i64, i64)> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..mask.len()).collect();
    idx.shuffle(rng);
    idx.into_iter().take(want.min(mask.len())).map(|i| mask[i]).collect()
}

fn fill_features(
    spec: &SyntheticSpec,
    mask: &[(i64, i64)],
    planted: &HashSet<(i64, i64)>,
    dir: &[f64],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let n = mask.len();
    let d = spec.dim;
    // Smooth background: a few random plane waves over the grid, each along
    // its own feature direction. Spatial neighbors get near-identical
    // contributions, so locality-preserving serializations can cancel them.
    let mut waves: Vec<(f64, f64, f64, Vec<f64>)> = Vec::new();
    if spec.spatial_noise > 0.0 {
        let tau = std::f64::consts::TAU;
        let scale = tau / spec.grid as f64;
        for _ in 0..3 {
            let fx = rng.gen_range(0.3..1.5) * scale;
            let fy = rng.gen_range(0.3..1.5) * scale;
            let phase = rng.gen_range(0.0..tau);
            let mut wdir: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
            let norm = wdir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut wdir {
                *x /= norm;
            }
            waves.push((fx, fy, phase, wdir));
        }
    }
    let mut data = vec![0.0; n * d];
    for (i, cell) in mask.iter().enumerate() {
        let row = &mut data[i * d..(i + 1) * d];
        for v in row.iter_mut() {
            *v = spec.noise * gaussian(rng);
        }
        if planted.contains(cell) {
            for (v, s) in row.iter_mut().zip(dir) {
                *v += spec.snr * s;
            }
        }
        for (fx, fy, phase, wdir) in &waves {
            let a = spec.spatial_noise * (fx * cell.0 as f64 + fy * cell.1 as f64 + phase).cos();
            for (v, s) in row.iter_mut().zip(wdir) {
                *v += a * s;
            }
        }
    }
    Tensor::new(vec![n, d], data).expect("generator shape")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
