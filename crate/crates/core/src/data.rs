//! Dataset loading: IDX-format MNIST for training, NPY-format corruption
//! sets for evaluation, and the shape-focused subset selection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::ImageBatch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// The fifteen corruption identifiers of the evaluation benchmark. The
/// release also ships an `identity` directory (clean copies), which is
/// loaded when present but never counted in corruption aggregates.
pub const CANONICAL_CORRUPTIONS: [&str; 15] = [
    "brightness",
    "canny_edges",
    "dotted_line",
    "fog",
    "glass_blur",
    "impulse_noise",
    "motion_blur",
    "rotate",
    "scale",
    "shear",
    "shot_noise",
    "spatter",
    "stripe",
    "translate",
    "zigzag",
];

pub const IDENTITY_NAME: &str = "identity";

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data(path.display().to_string(), "truncated file"))?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image file into `(n, rows, cols)` intensities in `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Array3<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(
            path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&mut r, path)? as usize;
    let rows = read_u32_be(&mut r, path)? as usize;
    let cols = read_u32_be(&mut r, path)? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::data(path.display().to_string(), "truncated image data"))?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Array3::from_shape_vec((n, rows, cols), data)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

/// Reads an IDX label file into class indices.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(
            path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&mut r, path)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::data(path.display().to_string(), "truncated label data"))?;
    if let Some(&bad) = bytes.iter().find(|&&b| b > 9) {
        return Err(Error::data(
            path.display().to_string(),
            format!("label {bad} outside 0..=9"),
        ));
    }
    Ok(bytes)
}

#[derive(Debug)]
pub struct MnistSplit {
    pub images: ImageBatch,
    pub labels: Vec<u8>,
}

#[derive(Debug)]
pub struct MnistData {
    pub train: MnistSplit,
    pub test: MnistSplit,
}

fn load_split(dir: &Path, images_name: &str, labels_name: &str) -> Result<MnistSplit> {
    let images = load_idx_images(&dir.join(images_name))?;
    let labels = load_idx_labels(&dir.join(labels_name))?;
    if images.dim().0 != labels.len() {
        return Err(Error::data(
            dir.display().to_string(),
            format!(
                "{} images but {} labels ({images_name} / {labels_name})",
                images.dim().0,
                labels.len()
            ),
        ));
    }
    Ok(MnistSplit {
        images: ImageBatch::new(images)?,
        labels,
    })
}

/// Loads the canonical train/test IDX files from a directory.
pub fn load_mnist(dir: &Path) -> Result<MnistData> {
    Ok(MnistData {
        train: load_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        test: load_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    })
}

// ---------------------------------------------------------------------------
// NPY
// ---------------------------------------------------------------------------

enum NpyValues {
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

struct NpyArray {
    shape: Vec<usize>,
    values: NpyValues,
}

fn parse_npy(path: &Path) -> Result<NpyArray> {
    let bad = |reason: String| Error::data(path.display().to_string(), reason);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header".into()))?;
    if &magic[0..6] != b"\x93NUMPY" {
        return Err(bad("not an NPY file (bad magic)".into()));
    }
    let major = magic[6];
    let header_len = if major == 1 {
        let mut b = [0u8; 2];
        r.read_exact(&mut b).map_err(|_| bad("truncated header".into()))?;
        u16::from_le_bytes(b) as usize
    } else {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header".into()))?;
        u32::from_le_bytes(b) as usize
    };
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| bad("truncated header".into()))?;
    let header = String::from_utf8_lossy(&header).to_string();

    let descr = extract_quoted(&header, "descr").ok_or_else(|| bad("missing descr".into()))?;
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran-order arrays are not supported".into()));
    }
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape".into()))?;
    let shape: Vec<usize> = shape_str
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| bad(format!("bad shape token '{t}'"))))
        .collect::<Result<_>>()?;
    let count: usize = shape.iter().product();

    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let need = |itemsize: usize| -> Result<()> {
        if raw.len() < count * itemsize {
            Err(bad(format!(
                "expected {} data bytes, found {}",
                count * itemsize,
                raw.len()
            )))
        } else {
            Ok(())
        }
    };
    let values = match descr.as_str() {
        "|u1" | "<u1" | "u1" => {
            need(1)?;
            NpyValues::U8(raw[..count].to_vec())
        }
        "<i4" => {
            need(4)?;
            NpyValues::I32(
                raw.chunks_exact(4)
                    .take(count)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        "<i8" => {
            need(8)?;
            NpyValues::I64(
                raw.chunks_exact(8)
                    .take(count)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        "<f4" => {
            need(4)?;
            NpyValues::F32(
                raw.chunks_exact(4)
                    .take(count)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        "<f8" => {
            need(8)?;
            NpyValues::F64(
                raw.chunks_exact(8)
                    .take(count)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(bad(format!("unsupported dtype '{other}'"))),
    };
    Ok(NpyArray { shape, values })
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let idx = header.find(&format!("'{key}':"))?;
    let rest = &header[idx..];
    let q1 = rest.find('\'')? + 1;
    let rest2 = &rest[q1..];
    let q2 = rest2.find(':')?;
    let val_region = &rest2[q2..];
    let a = val_region.find('\'')? + 1;
    let b = val_region[a..].find('\'')? + a;
    Some(val_region[a..b].to_string())
}

/// Squeezes trailing singleton axes: `(n, 28, 28, 1)` -> `(n, 28, 28)`.
fn squeeze(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    while s.len() > 1 && s.last() == Some(&1) {
        s.pop();
    }
    s
}

fn npy_images(path: &Path) -> Result<Array3<f32>> {
    let arr = parse_npy(path)?;
    let shape = squeeze(&arr.shape);
    if shape.len() != 3 {
        return Err(Error::data(
            path.display().to_string(),
            format!("expected (n, h, w) images, got shape {:?}", arr.shape),
        ));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let floats: Vec<f32> = match arr.values {
        NpyValues::U8(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
        NpyValues::I32(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
        NpyValues::I64(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
        NpyValues::F32(v) => rescale_floats(v.iter().map(|&x| x as f64)),
        NpyValues::F64(v) => rescale_floats(v.iter().copied()),
    };
    Array3::from_shape_vec((n, h, w), floats)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

/// Float images may ship either as 0..255 or already 0..1; normalize both.
fn rescale_floats(values: impl Iterator<Item = f64>) -> Vec<f32> {
    let collected: Vec<f64> = values.collect();
    let max = collected.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 1.5 { 1.0 / 255.0 } else { 1.0 };
    collected
        .iter()
        .map(|&v| ((v * scale).clamp(0.0, 1.0)) as f32)
        .collect()
}

fn npy_labels(path: &Path) -> Result<Vec<u8>> {
    let arr = parse_npy(path)?;
    let shape = squeeze(&arr.shape);
    if shape.len() != 1 {
        return Err(Error::data(
            path.display().to_string(),
            format!("expected (n,) labels, got shape {:?}", arr.shape),
        ));
    }
    let to_u8 = |v: i64, path: &Path| -> Result<u8> {
        if (0..=9).contains(&v) {
            Ok(v as u8)
        } else {
            Err(Error::data(
                path.display().to_string(),
                format!("label {v} outside 0..=9"),
            ))
        }
    };
    match arr.values {
        NpyValues::U8(v) => v.into_iter().map(|b| to_u8(b as i64, path)).collect(),
        NpyValues::I32(v) => v.into_iter().map(|b| to_u8(b as i64, path)).collect(),
        NpyValues::I64(v) => v.into_iter().map(|b| to_u8(b, path)).collect(),
        NpyValues::F32(v) => v.into_iter().map(|b| to_u8(b as i64, path)).collect(),
        NpyValues::F64(v) => v.into_iter().map(|b| to_u8(b as i64, path)).collect(),
    }
}

// ---------------------------------------------------------------------------
// corruption datasets
// ---------------------------------------------------------------------------

/// One corruption's test split: images in `[0, 1]` plus labels.
pub struct CorruptionDataset {
    pub name: String,
    pub images: ImageBatch,
    pub labels: Vec<u8>,
}

pub type CorruptionMap = BTreeMap<String, CorruptionDataset>;

/// Expected corruption names; read from `manifest.txt` under the dataset
/// root when present, else the canonical fifteen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub names: Vec<String>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            names: CANONICAL_CORRUPTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Self {
        let names = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_string())
            .collect();
        Manifest { names }
    }

    pub fn load_or_default(root: &Path) -> Self {
        match std::fs::read_to_string(root.join("manifest.txt")) {
            Ok(text) => Manifest::parse(&text),
            Err(_) => Manifest::default(),
        }
    }
}

fn load_corruption_dir(dir: &Path, name: &str) -> Result<CorruptionDataset> {
    let images = npy_images(&dir.join("test_images.npy"))?;
    let labels = npy_labels(&dir.join("test_labels.npy"))?;
    if images.dim().0 != labels.len() {
        return Err(Error::data(
            dir.display().to_string(),
            format!("{} images but {} labels", images.dim().0, labels.len()),
        ));
    }
    Ok(CorruptionDataset {
        name: name.to_string(),
        images: ImageBatch::new(images)?,
        labels,
    })
}

/// Loads every manifest corruption found under `root` (one directory per
/// corruption holding `test_images.npy` / `test_labels.npy`). Missing
/// directories produce warnings, not errors. The clean `identity` set is
/// loaded opportunistically when present.
pub fn load_mnist_c(root: &Path, manifest: &Manifest) -> Result<(CorruptionMap, Vec<String>)> {
    let mut map = CorruptionMap::new();
    let mut warnings = Vec::new();
    for name in &manifest.names {
        let dir = root.join(name);
        if !dir.is_dir() {
            warnings.push(format!("corruption '{name}' missing under {}", root.display()));
            continue;
        }
        map.insert(name.clone(), load_corruption_dir(&dir, name)?);
    }
    let identity_dir = root.join(IDENTITY_NAME);
    if identity_dir.is_dir() && !map.contains_key(IDENTITY_NAME) {
        map.insert(
            IDENTITY_NAME.to_string(),
            load_corruption_dir(&identity_dir, IDENTITY_NAME)?,
        );
    }
    Ok((map, warnings))
}

/// Restricts a corruption map to the configured shape-focused subset.
/// Every configured name must be present in the loaded map.
pub fn shape_subset<'a>(
    datasets: &'a CorruptionMap,
    names: &[String],
) -> Result<BTreeMap<&'a str, &'a CorruptionDataset>> {
    let mut out = BTreeMap::new();
    for name in names {
        let ds = datasets.get(name).ok_or_else(|| {
            Error::Config(format!(
                "shape_subset entry '{name}' is not among the loaded corruptions"
            ))
        })?;
        out.insert(ds.name.as_str(), ds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DEFAULT_SHAPE_SUBSET;
    use std::io::Write;

    fn write_idx_images(path: &Path, images: &[[u8; 4]], rows: u32, cols: u32) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    fn write_npy(path: &Path, descr: &str, shape: &[usize], data: &[u8]) {
        let shape_txt = match shape.len() {
            1 => format!("({},)", shape[0]),
            _ => format!(
                "({})",
                shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        };
        let mut header = format!(
            "{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}"
        );
        let total = 10 + header.len();
        let pad = (64 - total % 64) % 64;
        header.push_str(&" ".repeat(pad));
        header.push('\n');
        let mut f = File::create(path).unwrap();
        f.write_all(b"\x93NUMPY\x01\x00").unwrap();
        f.write_all(&(header.len() as u16).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(data).unwrap();
    }

    #[test]
    fn idx_images_parse_and_rescale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(&path, &[[0, 51, 102, 255], [255, 0, 255, 0]], 2, 2);
        let imgs = load_idx_images(&path).unwrap();
        assert_eq!(imgs.dim(), (2, 2, 2));
        assert!((imgs[[0, 0, 1]] - 0.2).abs() < 1e-6);
        assert_eq!(imgs[[0, 1, 1]], 1.0);
        assert!(imgs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_bad_magic_names_expected_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        std::fs::write(&path, 0x0000_0999u32.to_be_bytes()).unwrap();
        let err = load_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
    }

    #[test]
    fn idx_truncated_reports_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]); // needs 8
        std::fs::write(&path, bytes).unwrap();
        assert!(load_idx_images(&path).is_err());
    }

    #[test]
    fn mnist_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join("train-images-idx3-ubyte"),
            &[[0, 0, 0, 0]],
            2,
            2,
        );
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1, 2]);
        let err = load_split(
            dir.path(),
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("1 images but 2 labels"), "{err}");
    }

    #[test]
    fn npy_u8_images_with_channel_axis_squeeze() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_images.npy");
        let data: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
        write_npy(&path, "|u1", &[2, 28, 28, 1], &data);
        let imgs = npy_images(&path).unwrap();
        assert_eq!(imgs.dim(), (2, 28, 28));
        assert!((imgs[[0, 0, 1]] - 1.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn npy_i64_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_labels.npy");
        let labels: Vec<u8> = [3i64, 7, 0, 9]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write_npy(&path, "<i8", &[4], &labels);
        assert_eq!(npy_labels(&path).unwrap(), vec![3, 7, 0, 9]);
    }

    #[test]
    fn npy_rejects_fortran_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.npy");
        let mut f = File::create(&path).unwrap();
        let header = "{'descr': '|u1', 'fortran_order': True, 'shape': (1,), }          \n";
        f.write_all(b"\x93NUMPY\x01\x00").unwrap();
        f.write_all(&(header.len() as u16).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(&[1u8]).unwrap();
        assert!(parse_npy(&path).is_err());
    }

    fn fake_corruption_dir(root: &Path, name: &str, n: usize) {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let data: Vec<u8> = vec![128; n * 28 * 28];
        write_npy(&dir.join("test_images.npy"), "|u1", &[n, 28, 28, 1], &data);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        write_npy(&dir.join("test_labels.npy"), "|u1", &[n], &labels);
    }

    #[test]
    fn missing_corruption_warns_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        for name in &CANONICAL_CORRUPTIONS[..14] {
            fake_corruption_dir(dir.path(), name, 3);
        }
        let (map, warnings) = load_mnist_c(dir.path(), &Manifest::default()).unwrap();
        assert_eq!(map.len(), 14);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains(CANONICAL_CORRUPTIONS[14]));
    }

    #[test]
    fn full_release_loads_fifteen_plus_identity() {
        let dir = tempfile::tempdir().unwrap();
        for name in &CANONICAL_CORRUPTIONS {
            fake_corruption_dir(dir.path(), name, 2);
        }
        fake_corruption_dir(dir.path(), IDENTITY_NAME, 2);
        let (map, warnings) = load_mnist_c(dir.path(), &Manifest::default()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(map.len(), 16);
        assert!(map.contains_key(IDENTITY_NAME));
        let n_corruptions = map.keys().filter(|k| k.as_str() != IDENTITY_NAME).count();
        assert_eq!(n_corruptions, 15);
    }

    #[test]
    fn manifest_file_overrides_default() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "# two sets\nfog\nzigzag\n").unwrap();
        let manifest = Manifest::load_or_default(dir.path());
        assert_eq!(manifest.names, vec!["fog".to_string(), "zigzag".to_string()]);
    }

    #[test]
    fn shape_subset_selects_and_partitions() {
        let dir = tempfile::tempdir().unwrap();
        for name in &CANONICAL_CORRUPTIONS {
            fake_corruption_dir(dir.path(), name, 1);
        }
        let (map, _) = load_mnist_c(dir.path(), &Manifest::default()).unwrap();
        let names: Vec<String> = DEFAULT_SHAPE_SUBSET.iter().map(|s| s.to_string()).collect();
        let subset = shape_subset(&map, &names).unwrap();
        assert!(subset.contains_key("fog"));
        assert_eq!(subset.len(), 8);
        // subset + complement cover all fifteen corruptions
        let complement: Vec<&String> = map
            .keys()
            .filter(|k| k.as_str() != IDENTITY_NAME && !subset.contains_key(k.as_str()))
            .collect();
        assert_eq!(subset.len() + complement.len(), 15);
        // empty subset is empty
        assert!(shape_subset(&map, &[]).unwrap().is_empty());
        // unknown name is an error
        assert!(shape_subset(&map, &["sparkle".to_string()]).is_err());
    }
}
