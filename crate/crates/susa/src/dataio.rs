//! File formats, synthetic scenes, patch sampling, and low-shot splits.
//!
//! Cubes and label maps are stored as raw little-endian payloads with a
//! structured-text sidecar header (`<path>.hdr`). Checkpoints are a single
//! container file: magic, length-prefixed JSON manifest, then concatenated
//! raw f32le parameter payloads. All formats are platform independent.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Param, ParamKind, ParamSet};
use crate::spectral::{HsiCube, SensorSpec};

// ---------------------------------------------------------------------------
// Label maps
// ---------------------------------------------------------------------------

/// Per-pixel class ids: 0 = unlabeled, 1..=C are classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub ids: Array2<u16>,
    pub class_names: Vec<String>,
}

impl LabelMap {
    pub fn new(ids: Array2<u16>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len() as u16;
        if let Some(&bad) = ids.iter().find(|&&v| v > c) {
            return Err(Error::InvalidArgument(format!(
                "label id {bad} exceeds class count {c}"
            )));
        }
        Ok(LabelMap { ids, class_names })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn height(&self) -> usize {
        self.ids.dim().0
    }

    pub fn width(&self) -> usize {
        self.ids.dim().1
    }
}

// ---------------------------------------------------------------------------
// Raw payload helpers
// ---------------------------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn f32s_to_le(values: impl Iterator<Item = f32>, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn hdr_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    std::path::PathBuf::from(s)
}

/// Parse a `key: value` sidecar into a map, preserving insertion order needs
/// not matter.
fn parse_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::format(path.display().to_string(), "sidecar is not UTF-8"))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::format(path.display().to_string(), format!("bad sidecar line: {line}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn sidecar_get<'a>(map: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::format(path.display().to_string(), format!("missing sidecar key {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(path.display().to_string(), format!("bad value for {key}: {s}")))
}

fn parse_num_list<T: std::str::FromStr>(s: &str, key: &str, path: &Path) -> Result<Vec<T>> {
    s.split_whitespace().map(|t| parse_num(t, key, path)).collect()
}

/// Payload size in bytes for an f32le BIP cube.
pub fn expected_cube_payload_bytes(height: usize, width: usize, bands: usize) -> usize {
    height * width * bands * 4
}

// ---------------------------------------------------------------------------
// Cube format
// ---------------------------------------------------------------------------

/// Write a cube: raw f32le, pixel-interleaved (band varies fastest), plus a
/// `<path>.hdr` sidecar. Round trips are bit-exact.
pub fn save_cube(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    let path = path.as_ref();
    let values = cube
        .values
        .as_standard_layout();
    let bytes = f32s_to_le(values.iter().copied(), values.len());
    write_file(path, &bytes)?;
    let centers: Vec<String> = cube.spec.centers_nm.iter().map(|v| format!("{v}")).collect();
    let fwhms: Vec<String> = cube.spec.fwhm_nm.iter().map(|v| format!("{v}")).collect();
    let hdr = format!(
        "height: {}\nwidth: {}\nbands: {}\nband_centers_nm: {}\nfwhm_nm: {}\nsensor: {}\ngsd_m: {}\ndtype: f32le\ninterleave: bip\n",
        cube.height(),
        cube.width(),
        cube.bands(),
        centers.join(" "),
        fwhms.join(" "),
        cube.spec.name,
        cube.gsd_m,
    );
    write_file(&hdr_path(path), hdr.as_bytes())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let hp = hdr_path(path);
    let map = parse_sidecar(&hp)?;
    let h: usize = parse_num(sidecar_get(&map, "height", &hp)?, "height", &hp)?;
    let w: usize = parse_num(sidecar_get(&map, "width", &hp)?, "width", &hp)?;
    let b: usize = parse_num(sidecar_get(&map, "bands", &hp)?, "bands", &hp)?;
    let centers: Vec<f64> = parse_num_list(sidecar_get(&map, "band_centers_nm", &hp)?, "band_centers_nm", &hp)?;
    let fwhms: Vec<f64> = parse_num_list(sidecar_get(&map, "fwhm_nm", &hp)?, "fwhm_nm", &hp)?;
    let sensor = sidecar_get(&map, "sensor", &hp)?.to_string();
    let gsd: f64 = parse_num(sidecar_get(&map, "gsd_m", &hp)?, "gsd_m", &hp)?;
    let dtype = sidecar_get(&map, "dtype", &hp)?;
    if dtype != "f32le" {
        return Err(Error::format(hp.display().to_string(), format!("unsupported dtype {dtype}")));
    }
    let bytes = read_file(path)?;
    let expected = expected_cube_payload_bytes(h, w, b);
    if bytes.len() != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload size mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let values = ArrayD::from_shape_vec(IxDyn(&[h, w, b]), le_to_f32s(&bytes)).unwrap();
    let spec = SensorSpec::new(sensor, centers, fwhms)?;
    HsiCube::new(values, spec, gsd)
}

// ---------------------------------------------------------------------------
// Label map format (raw u16le + sidecar)
// ---------------------------------------------------------------------------

pub fn save_label_map(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(map.ids.len() * 2);
    for &v in map.ids.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)?;
    let mut hdr = format!(
        "height: {}\nwidth: {}\ndtype: u16le\nclasses: {}\n",
        map.height(),
        map.width(),
        map.classes()
    );
    for (i, name) in map.class_names.iter().enumerate() {
        hdr.push_str(&format!("class_{}: {}\n", i + 1, name));
    }
    write_file(&hdr_path(path), hdr.as_bytes())
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let hp = hdr_path(path);
    let m = parse_sidecar(&hp)?;
    let h: usize = parse_num(sidecar_get(&m, "height", &hp)?, "height", &hp)?;
    let w: usize = parse_num(sidecar_get(&m, "width", &hp)?, "width", &hp)?;
    let c: usize = parse_num(sidecar_get(&m, "classes", &hp)?, "classes", &hp)?;
    let mut names = Vec::with_capacity(c);
    for i in 0..c {
        names.push(sidecar_get(&m, &format!("class_{}", i + 1), &hp)?.to_string());
    }
    let bytes = read_file(path)?;
    if bytes.len() != h * w * 2 {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload size mismatch: expected {} bytes, found {}", h * w * 2, bytes.len()),
        ));
    }
    let ids: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|ch| u16::from_le_bytes([ch[0], ch[1]]))
        .collect();
    LabelMap::new(Array2::from_shape_vec((h, w), ids).unwrap(), names)
}

// ---------------------------------------------------------------------------
// Generic tensor file (features, patch sets)
// ---------------------------------------------------------------------------

/// Save an f32 tensor of any rank with a sidecar carrying its shape and
/// optional extra `key: value` entries.
pub fn save_tensor(path: impl AsRef<Path>, tensor: &ArrayD<f32>, extra: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let values = tensor.as_standard_layout();
    write_file(path, &f32s_to_le(values.iter().copied(), values.len()))?;
    let shape: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
    let mut hdr = format!("shape: {}\ndtype: f32le\n", shape.join(" "));
    for (k, v) in extra {
        hdr.push_str(&format!("{k}: {v}\n"));
    }
    write_file(&hdr_path(path), hdr.as_bytes())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(ArrayD<f32>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let hp = hdr_path(path);
    let map = parse_sidecar(&hp)?;
    let shape: Vec<usize> = parse_num_list(sidecar_get(&map, "shape", &hp)?, "shape", &hp)?;
    let expected: usize = shape.iter().product::<usize>() * 4;
    let bytes = read_file(path)?;
    if bytes.len() != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload size mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let tensor = ArrayD::from_shape_vec(IxDyn(&shape), le_to_f32s(&bytes)).unwrap();
    Ok((tensor, map))
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// Randomly sampled square patches plus a 90/10 train/validation split.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// `[N, size, size, B]`; the first `train_count` patches are training.
    pub data: Array4<f32>,
    pub train_count: usize,
}

impl PatchSet {
    pub fn train(&self) -> ndarray::ArrayView4<'_, f32> {
        self.data.slice(ndarray::s![..self.train_count, .., .., ..])
    }
    pub fn validation(&self) -> ndarray::ArrayView4<'_, f32> {
        self.data.slice(ndarray::s![self.train_count.., .., .., ..])
    }
}

/// Sample `n` size x size patches across cubes, with cubes weighted by their
/// count of valid top-left corners. Deterministic per seed; the split
/// reserves n/10 patches for validation (50,000 -> 45,000/5,000).
pub fn sample_patches(cubes: &[&HsiCube], n: usize, size: usize, seed: u64) -> Result<PatchSet> {
    let mut usable: Vec<(&HsiCube, usize)> = Vec::new();
    let mut bands = None;
    for cube in cubes {
        if cube.height() < size || cube.width() < size {
            log::warn!(
                "skipping cube {} ({}x{}): smaller than patch size {size}",
                cube.spec.name,
                cube.height(),
                cube.width()
            );
            continue;
        }
        match bands {
            None => bands = Some(cube.bands()),
            Some(b) if b != cube.bands() => {
                return Err(Error::shape(
                    "sample_patches bands",
                    format!("{b}"),
                    format!("{} (cube {})", cube.bands(), cube.spec.name),
                ))
            }
            _ => {}
        }
        let positions = (cube.height() - size + 1) * (cube.width() - size + 1);
        usable.push((cube, positions));
    }
    let bands = bands.ok_or_else(|| Error::InvalidArgument("no cube large enough for patch sampling".into()))?;
    let total_positions: usize = usable.iter().map(|u| u.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array4::<f32>::zeros((n, size, size, bands));
    for i in 0..n {
        let mut pick = rng.gen_range(0..total_positions);
        let (cube, _) = usable
            .iter()
            .find(|u| {
                if pick < u.1 {
                    true
                } else {
                    pick -= u.1;
                    false
                }
            })
            .unwrap();
        // pick is a flat index into this cube's valid-corner grid.
        let cols_count = cube.width() - size + 1;
        let y = pick / cols_count;
        let x = pick % cols_count;
        let patch = cube
            .values
            .slice(ndarray::s![y..y + size, x..x + size, ..]);
        data.slice_mut(ndarray::s![i, .., .., ..]).assign(&patch);
    }
    let val = n / 10;
    Ok(PatchSet { data, train_count: n - val })
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Parameters of the synthetic scene generator. Stands in for real
/// benchmark data at desk scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Per-band white-noise sigma.
    pub noise: f32,
    /// Per-pixel multiplicative intra-class variation sigma.
    pub intra_class_variation: f32,
    pub blobs_per_class: usize,
    /// Minimum pairwise angle between endmember spectra, degrees.
    pub min_endmember_angle_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            classes: 4,
            bands: 32,
            height: 64,
            width: 64,
            noise: 0.02,
            intra_class_variation: 0.05,
            blobs_per_class: 3,
            min_endmember_angle_deg: 10.0,
            seed: 0,
        }
    }
}

fn endmember(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    // Smooth positive curve: baseline plus a few Gaussian bumps in band space.
    let bumps = rng.gen_range(2..=4);
    let mut e = vec![0.2f64; bands];
    for _ in 0..bumps {
        let amp: f64 = rng.gen_range(0.3..1.0);
        let mu: f64 = rng.gen_range(0.0..bands as f64);
        let s: f64 = rng.gen_range(bands as f64 / 20.0..bands as f64 / 5.0);
        for (b, v) in e.iter_mut().enumerate() {
            let d = b as f64 - mu;
            *v += amp * (-d * d / (2.0 * s * s)).exp();
        }
    }
    e
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Generate a fully labeled synthetic scene: seeded smooth class blobs, one
/// distinct endmember spectrum per class, small intra-class variation, and
/// white noise.
pub fn synth_scene(spec: &SyntheticSceneSpec) -> Result<(HsiCube, LabelMap)> {
    if spec.classes < 2 || spec.bands < 4 {
        return Err(Error::InvalidArgument(format!(
            "synthetic scene needs >= 2 classes and >= 4 bands, got {}/{}",
            spec.classes, spec.bands
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Endmembers with enforced pairwise angular separation.
    let mut endmembers: Vec<Vec<f64>> = Vec::new();
    for c in 0..spec.classes {
        let mut tries = 0;
        loop {
            let e = endmember(&mut rng, spec.bands);
            if endmembers.iter().all(|prev| angle_deg(prev, &e) >= spec.min_endmember_angle_deg) {
                endmembers.push(e);
                break;
            }
            tries += 1;
            if tries > 200 {
                return Err(Error::InvalidArgument(format!(
                    "could not draw {} endmembers with >= {} deg separation (stuck at class {c})",
                    spec.classes, spec.min_endmember_angle_deg
                )));
            }
        }
    }

    // Class regions from seeded blob centers; retry with wider radii if a
    // class fails to appear.
    let (h, w) = (spec.height, spec.width);
    let mut ids = Array2::<u16>::zeros((h, w));
    let mut widen = 1.0f64;
    let mut placed = false;
    for _ in 0..5 {
        let mut blobs: Vec<(usize, f64, f64, f64, f64)> = Vec::new(); // (class, y, x, radius, weight)
        for c in 0..spec.classes {
            for _ in 0..spec.blobs_per_class {
                blobs.push((
                    c,
                    rng.gen_range(0.0..h as f64),
                    rng.gen_range(0.0..w as f64),
                    widen * rng.gen_range(0.15..0.5) * h.min(w) as f64,
                    rng.gen_range(0.5..1.5),
                ));
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut best_class = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for &(c, by, bx, r, wt) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    let score = wt / (1.0 + d2 / (r * r));
                    if score > best_score {
                        best_score = score;
                        best_class = c;
                    }
                }
                ids[[y, x]] = best_class as u16 + 1;
            }
        }
        let mut present = vec![false; spec.classes];
        for &v in ids.iter() {
            present[v as usize - 1] = true;
        }
        if present.iter().all(|&p| p) {
            placed = true;
            break;
        }
        widen *= 1.5;
    }
    if !placed {
        return Err(Error::InvalidArgument("blob generation failed to place all classes".into()));
    }

    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut values = ArrayD::<f32>::zeros(IxDyn(&[h, w, spec.bands]));
    for y in 0..h {
        for x in 0..w {
            let c = ids[[y, x]] as usize - 1;
            let scale = 1.0 + spec.intra_class_variation as f64 * normal.sample(&mut rng);
            for b in 0..spec.bands {
                let v = endmembers[c][b] * scale + spec.noise as f64 * normal.sample(&mut rng);
                values[[y, x, b]] = v as f32;
            }
        }
    }

    let sensor = SensorSpec::uniform(format!("synthetic-{}", spec.seed), 400.0, 10.0, spec.bands, 10.0);
    let cube = HsiCube::new(values, sensor, 1.0)?;
    let names = (1..=spec.classes).map(|c| format!("class_{c}")).collect();
    let map = LabelMap::new(ids, names)?;
    Ok((cube, map))
}

// ---------------------------------------------------------------------------
// Low-shot splits
// ---------------------------------------------------------------------------

/// Per-class training pixels sampled without replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowShotSplit {
    pub seed: u64,
    /// class id (1..=C) -> training pixel (row, col) list.
    pub per_class: BTreeMap<u16, Vec<(usize, usize)>>,
    /// class id -> requested-minus-available shortfall (only when short).
    pub shortfall: BTreeMap<u16, usize>,
}

impl LowShotSplit {
    pub fn training_pixels(&self) -> impl Iterator<Item = (u16, (usize, usize))> + '_ {
        self.per_class
            .iter()
            .flat_map(|(&c, pixels)| pixels.iter().map(move |&p| (c, p)))
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(|v| v.len()).sum()
    }
}

/// Sample `L` labeled training pixels per class (uniform, without
/// replacement). `overrides` replaces L for specific class ids. Classes with
/// fewer than L labeled pixels take all and record the shortfall; empty
/// classes are recorded, not fatal.
pub fn lowshot_split(
    labels: &LabelMap,
    l: usize,
    overrides: &BTreeMap<u16, usize>,
    seed: u64,
) -> Result<LowShotSplit> {
    if l < 1 {
        return Err(Error::InvalidArgument("L must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = BTreeMap::new();
    let mut shortfall = BTreeMap::new();
    for class in 1..=labels.classes() as u16 {
        let want = *overrides.get(&class).unwrap_or(&l);
        let mut pixels: Vec<(usize, usize)> = labels
            .ids
            .indexed_iter()
            .filter(|(_, &v)| v == class)
            .map(|((y, x), _)| (y, x))
            .collect();
        if pixels.len() < want {
            shortfall.insert(class, want - pixels.len());
        }
        pixels.shuffle(&mut rng);
        pixels.truncate(want);
        pixels.sort_unstable();
        per_class.insert(class, pixels);
    }
    Ok(LowShotSplit { seed, per_class, shortfall })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SUSACKP1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: serde_json::Value,
    params: Vec<ManifestParam>,
}

/// Write a checkpoint container: magic + u32le manifest length + JSON
/// manifest + concatenated raw f32le parameter payloads (in order).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    config: &serde_json::Value,
    params: &ParamSet,
) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        kind: kind.to_string(),
        config: config.clone(),
        params: params
            .params
            .iter()
            .map(|p| ManifestParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                kind: p.kind,
            })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| Error::format(path.display().to_string(), format!("manifest encode: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut wtr = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    wtr.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    wtr.write_all(&(mjson.len() as u32).to_le_bytes()).map_err(io)?;
    wtr.write_all(&mjson).map_err(io)?;
    for p in &params.params {
        let std_layout = p.value.as_standard_layout();
        for &v in std_layout.iter() {
            wtr.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    wtr.flush().map_err(io)
}

/// Read a checkpoint container back. Returns (kind, config, parameters).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, serde_json::Value, ParamSet)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = std::io::BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 8];
    rdr.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path.display().to_string(), "bad checkpoint magic"));
    }
    let mut len = [0u8; 4];
    rdr.read_exact(&mut len).map_err(io)?;
    let mlen = u32::from_le_bytes(len) as usize;
    let mut mjson = vec![0u8; mlen];
    rdr.read_exact(&mut mjson).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&mjson)
        .map_err(|e| Error::format(path.display().to_string(), format!("manifest decode: {e}")))?;
    let mut params = ParamSet::default();
    for mp in &manifest.params {
        let n: usize = mp.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        rdr.read_exact(&mut bytes).map_err(|_| {
            Error::format(
                path.display().to_string(),
                format!("payload truncated while reading parameter {}", mp.name),
            )
        })?;
        let value = ArrayD::from_shape_vec(IxDyn(&mp.shape), le_to_f32s(&bytes)).unwrap();
        params.params.push(Param { name: mp.name.clone(), value, kind: mp.kind });
    }
    let mut trailing = Vec::new();
    rdr.read_to_end(&mut trailing).map_err(io)?;
    if !trailing.is_empty() {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} unexpected trailing bytes after parameters", trailing.len()),
        ));
    }
    Ok((manifest.kind, manifest.config, params))
}
