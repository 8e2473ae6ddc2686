//! On-disk formats: tensor files, binary PPM images, pose and intrinsics
//! text rows, and sample directories.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evalkit::Sample;
use crate::geometry::{CameraModel, ImageBuffer, RelativePose, WarpVolume};
use crate::masks::{DepthMap, MultiplaneMask};

pub const TENSOR_MAGIC: &[u8; 4] = b"MMVS";
pub const TENSOR_VERSION: u8 = 1;

/// Little-endian `f32` tensor with up to 255 axes. NaN marks missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(format_err(format!("{} axes exceed the format limit", shape.len())));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(format_err(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[TENSOR_VERSION, self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| format_err(format!("axis {d} too large")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head).map_err(|_| format_err("truncated tensor header"))?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(format_err("not a tensor file"));
        }
        if head[4] != TENSOR_VERSION {
            return Err(format_err(format!("unsupported tensor version {}", head[4])));
        }
        let mut shape = Vec::with_capacity(head[5] as usize);
        for _ in 0..head[5] {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| format_err("truncated tensor axes"))?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * n {
            return Err(format_err(format!("payload has {} bytes, axes {shape:?} need {}", bytes.len(), 4 * n)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Depth map as an `[H, W]` tensor with NaN at invalid pixels.
pub fn depth_to_tensor(d: &DepthMap) -> Result<TensorFile> {
    TensorFile::from_f64(vec![d.height, d.width], &d.to_nan_filled())
}

pub fn depth_from_tensor(t: &TensorFile) -> Result<DepthMap> {
    match t.shape[..] {
        [h, w] => DepthMap::from_values(h, w, t.to_f64()),
        _ => Err(format_err(format!("depth tensor must have 2 axes, got {:?}", t.shape))),
    }
}

pub fn save_depth(path: &Path, d: &DepthMap) -> Result<()> {
    depth_to_tensor(d)?.save(path)
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    depth_from_tensor(&TensorFile::load(path)?)
}

/// Masks as a `[D, H, W]` tensor; invalid pixels are NaN in every plane.
pub fn masks_to_tensor(m: &MultiplaneMask) -> Result<TensorFile> {
    let n = m.height * m.width;
    let data: Vec<f64> = (0..m.values.len())
        .map(|i| if m.pixel_valid(i % n) { m.values[i] } else { f64::NAN })
        .collect();
    TensorFile::from_f64(vec![m.planes, m.height, m.width], &data)
}

pub fn masks_from_tensor(t: &TensorFile) -> Result<MultiplaneMask> {
    let [d, h, w] = t.shape[..] else {
        return Err(format_err(format!("mask tensor must have 3 axes, got {:?}", t.shape)));
    };
    let n = h * w;
    let raw = t.to_f64();
    let validity: Vec<bool> = (0..n).map(|p| (0..d).all(|i| !raw[i * n + p].is_nan())).collect();
    let values = raw.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
    let mut m = MultiplaneMask::new(d, h, w, values)?;
    if validity.iter().any(|v| !v) {
        m.validity = Some(validity);
    }
    Ok(m)
}

pub fn volume_to_tensor(v: &WarpVolume) -> Result<TensorFile> {
    TensorFile::from_f64(vec![v.channels(), v.height, v.width], &v.data)
}

/// Binary PPM (P6, maxval 255) of a 3-channel image with values in [0, 1].
pub fn write_ppm<W: Write>(mut w: W, img: &ImageBuffer) -> Result<()> {
    if img.channels != 3 {
        return Err(format_err(format!("PPM needs 3 channels, image has {}", img.channels)));
    }
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let n = img.height * img.width;
    let mut bytes = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            bytes.push((img.data[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if tok.is_empty() { Err(format_err("truncated PPM header")) } else { Ok(tok) };
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            c => tok.push(c as char),
        }
    }
}

pub fn read_ppm<R: BufRead>(mut r: R) -> Result<ImageBuffer> {
    if ppm_token(&mut r)? != "P6" {
        return Err(format_err("only binary P6 PPM is supported"));
    }
    let mut num = |what: &str| -> Result<usize> {
        ppm_token(&mut r)?.parse().map_err(|_| format_err(format!("bad PPM {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(format_err(format!("PPM maxval {maxval} unsupported")));
    }
    let n = w * h;
    let mut bytes = vec![0u8; 3 * n];
    r.read_exact(&mut bytes).map_err(|_| format_err("truncated PPM pixels"))?;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = bytes[3 * p + c] as f64 / 255.0;
        }
    }
    ImageBuffer::new(3, h, w, data)
}

pub fn save_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_ppm(BufWriter::new(File::create(path)?), img)
}

pub fn load_ppm(path: &Path) -> Result<ImageBuffer> {
    read_ppm(BufReader::new(File::open(path)?))
}

fn parse_row(text: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format_err(format!("bad number `{t}` in {what}"))))
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(format_err(format!("{what} needs {expected} numbers, found {}", vals.len())));
    }
    Ok(vals)
}

fn join_row(vals: &[f64]) -> String {
    let parts: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
    parts.join(" ") + "\n"
}

/// Pose row: rotation row-major then translation.
pub fn format_pose(p: &RelativePose) -> String {
    join_row(&p.to_row())
}

pub fn parse_pose(text: &str) -> Result<RelativePose> {
    let v = parse_row(text, 12, "pose")?;
    RelativePose::from_row(&v.try_into().expect("12 values"))
}

/// Intrinsics row: `fx fy cx cy`.
pub fn format_intrinsics(c: &CameraModel) -> String {
    join_row(&[c.fx, c.fy, c.cx, c.cy])
}

pub fn parse_intrinsics(text: &str, width: usize, height: usize) -> Result<CameraModel> {
    let v = parse_row(text, 4, "intrinsics")?;
    CameraModel::new(v[0], v[1], v[2], v[3], width, height)
}

pub const REFERENCE_FILE: &str = "reference.ppm";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const DEPTH_FILE: &str = "depth.mmvs";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn neighbour_file(k: usize) -> String {
    format!("neighbour_{k}.ppm")
}

pub fn pose_file(k: usize) -> String {
    format!("pose_{k}.txt")
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_ppm(&dir.join(REFERENCE_FILE), &s.reference)?;
    fs::write(dir.join(INTRINSICS_FILE), format_intrinsics(&s.camera))?;
    save_depth(&dir.join(DEPTH_FILE), &s.truth)?;
    for (k, (img, pose)) in s.neighbours.iter().enumerate() {
        save_ppm(&dir.join(neighbour_file(k)), img)?;
        fs::write(dir.join(pose_file(k)), format_pose(pose))?;
    }
    Ok(())
}

/// Reference, camera and every `neighbour_K.ppm` with its `pose_K.txt`.
/// The depth file is optional so the same layout serves inference inputs.
pub struct SampleFiles {
    pub reference: ImageBuffer,
    pub camera: CameraModel,
    pub neighbours: Vec<(ImageBuffer, RelativePose)>,
    pub truth: Option<DepthMap>,
}

pub fn read_sample_dir(dir: &Path) -> Result<SampleFiles> {
    let reference = load_ppm(&dir.join(REFERENCE_FILE))?;
    let camera = parse_intrinsics(&fs::read_to_string(dir.join(INTRINSICS_FILE))?, reference.width, reference.height)?;
    let mut neighbours = Vec::new();
    for k in 0.. {
        let img_path = dir.join(neighbour_file(k));
        if !img_path.exists() {
            break;
        }
        let pose_path = dir.join(pose_file(k));
        if !pose_path.exists() {
            return Err(format_err(format!("{} has no pose file {}", img_path.display(), pose_path.display())));
        }
        let img = load_ppm(&img_path)?;
        if !img.same_dims(&reference) {
            return Err(Error::ShapeMismatch(format!("{} differs in size from the reference", img_path.display())));
        }
        neighbours.push((img, parse_pose(&fs::read_to_string(pose_path)?)?));
    }
    let depth_path = dir.join(DEPTH_FILE);
    let truth = if depth_path.exists() { Some(load_depth(&depth_path)?) } else { None };
    Ok(SampleFiles { reference, camera, neighbours, truth })
}

pub fn read_sample(dir: &Path, seed: u64) -> Result<Sample> {
    let f = read_sample_dir(dir)?;
    let truth = f.truth.ok_or_else(|| format_err(format!("{} has no {DEPTH_FILE}", dir.display())))?;
    Ok(Sample { seed, reference: f.reference, neighbours: f.neighbours, camera: f.camera, truth })
}

/// Manifest entry: sample directory (relative to the dataset root) and seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{}\t{}\n", e.dir, e.seed)).collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (dir, seed) = l.split_once('\t').ok_or_else(|| format_err(format!("bad manifest line `{l}`")))?;
            let seed = seed.trim().parse().map_err(|_| format_err(format!("bad seed in `{l}`")))?;
            Ok(ManifestEntry { dir: dir.to_string(), seed })
        })
        .collect()
}

/// Sample directories of a dataset, in manifest order.
pub fn read_manifest(root: &Path) -> Result<Vec<(ManifestEntry, PathBuf)>> {
    let text = fs::read_to_string(root.join(MANIFEST_FILE))
        .map_err(|e| format_err(format!("cannot read {}: {e}", root.join(MANIFEST_FILE).display())))?;
    Ok(parse_manifest(&text)?.into_iter().map(|e| {
        let p = root.join(&e.dir);
        (e, p)
    }).collect())
}
