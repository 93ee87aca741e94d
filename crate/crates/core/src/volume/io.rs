//! Volume file format: a short text header followed by the raw payload.
//!
//! ```text
//! ANATOVOL 1
//! dims: 48 48 48
//! spacing: 1.5 1.5 1.5
//! dtype: f32
//! byte_order: little
//! end_header
//! <H*W*D little-endian scalars, x fastest>
//! ```
//!
//! Label files use `dtype: u16` and add a `classes: C` line.

use super::{LabelVolume, Result, Volume, VolumeError};
use std::fs;
use std::path::Path;

const MAGIC: &str = "ANATOVOL 1";
const END: &str = "end_header\n";

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn header_err(path: &Path, msg: impl Into<String>) -> VolumeError {
    VolumeError::Header {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn write_file(path: &Path, header: String, payload: Vec<u8>) -> Result<()> {
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(index) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(VolumeError::NonFinite { index });
    }
    let [h, w, d] = v.dims();
    let [sx, sy, sz] = v.spacing();
    let header = format!(
        "{MAGIC}\ndims: {h} {w} {d}\nspacing: {sx:?} {sy:?} {sz:?}\ndtype: f32\nbyte_order: little\n{END}"
    );
    let payload = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(path, header, payload)
}

pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [h, w, d] = labels.dims();
    let header = format!(
        "{MAGIC}\ndims: {h} {w} {d}\nspacing: 1.0 1.0 1.0\ndtype: u16\nbyte_order: little\nclasses: {}\n{END}",
        labels.classes()
    );
    let payload = labels.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(path, header, payload)
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    classes: Option<u16>,
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| header_err(path, format!("cannot parse {key}: {value:?}")))?;
    parts
        .try_into()
        .map_err(|_| header_err(path, format!("{key} needs three values")))
}

fn parse(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    let end = bytes
        .windows(END.len())
        .position(|w| w == END.as_bytes())
        .ok_or_else(|| header_err(path, "missing end_header"))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| header_err(path, "header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(header_err(path, "bad magic line"));
    }
    let (mut dims, mut spacing, mut dtype, mut order, mut classes) =
        (None, None, None, None, None);
    for line in lines {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| header_err(path, format!("expected `key: value`, got {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "dims" => dims = Some(parse_triple::<usize>(path, "dims", value)?),
            "spacing" => spacing = Some(parse_triple::<f64>(path, "spacing", value)?),
            "dtype" => dtype = Some(value.to_string()),
            "byte_order" => order = Some(value.to_string()),
            "classes" => {
                classes = Some(
                    value
                        .parse::<u16>()
                        .map_err(|_| header_err(path, "cannot parse classes"))?,
                )
            }
            other => return Err(header_err(path, format!("unknown key {other:?}"))),
        }
    }
    let order = order.ok_or_else(|| header_err(path, "missing byte_order"))?;
    if order != "little" {
        return Err(VolumeError::ByteOrder {
            path: path.to_path_buf(),
            token: order,
        });
    }
    let header = Header {
        dims: dims.ok_or_else(|| header_err(path, "missing dims"))?,
        spacing: spacing.ok_or_else(|| header_err(path, "missing spacing"))?,
        dtype: dtype.ok_or_else(|| header_err(path, "missing dtype"))?,
        classes,
    };
    Ok((header, end + END.len()))
}

fn payload<'a>(path: &Path, bytes: &'a [u8], n: usize, width: usize) -> Result<&'a [u8]> {
    let expected = n * width;
    let found = bytes.len();
    if found < expected {
        return Err(VolumeError::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(VolumeError::TrailingData {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(bytes)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (header, offset) = parse(path, &bytes)?;
    if header.dtype != "f32" {
        return Err(header_err(path, format!("expected dtype f32, got {}", header.dtype)));
    }
    let n: usize = header.dims.iter().product();
    let raw = payload(path, &bytes[offset..], n, 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = data.iter().position(|x| !x.is_finite()) {
        return Err(VolumeError::NonFiniteInFile {
            path: path.to_path_buf(),
            index,
        });
    }
    Volume::new(header.dims, header.spacing, data)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (header, offset) = parse(path, &bytes)?;
    if header.dtype != "u16" {
        return Err(header_err(path, format!("expected dtype u16, got {}", header.dtype)));
    }
    let classes = header
        .classes
        .ok_or_else(|| header_err(path, "label file without classes"))?;
    let n: usize = header.dims.iter().product();
    let raw = payload(path, &bytes[offset..], n, 2)?;
    let data = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(header.dims, classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> Volume {
        Volume::from_fn([4, 4, 4], [1.5, 0.7, 2.25], |x, y, z| {
            (x + 4 * y + 16 * z) as f32 * 0.1 - 3.0
        })
        .unwrap()
    }

    #[test]
    fn single_voxel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.vol");
        let v = Volume::filled([1, 1, 1], [1.0; 3], 0.0).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), [1, 1, 1]);
        assert_eq!(back.data(), &[0.0]);
    }

    #[test]
    fn ramp_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.vol");
        let v = ramp();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    fn raw_file(header: &str, payload: &[f32]) -> Vec<u8> {
        let mut bytes = header.as_bytes().to_vec();
        for x in payload {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn short_payload_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.vol");
        let header = "ANATOVOL 1\ndims: 2 2 2\nspacing: 1 1 1\ndtype: f32\nbyte_order: little\nend_header\n";
        fs::write(&p, raw_file(header, &[1.0; 7])).unwrap();
        assert!(matches!(
            load_volume(&p),
            Err(VolumeError::Truncated { expected: 32, found: 28, .. })
        ));
    }

    #[test]
    fn unknown_byte_order_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.vol");
        let header = "ANATOVOL 1\ndims: 1 1 1\nspacing: 1 1 1\ndtype: f32\nbyte_order: big\nend_header\n";
        fs::write(&p, raw_file(header, &[1.0])).unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::ByteOrder { .. })));
    }

    #[test]
    fn malformed_and_non_finite_files_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol");
        fs::write(&p, b"hello\nend_header\n").unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::Header { .. })));

        let header = "ANATOVOL 1\ndims: 1 1 2\nspacing: 1 1 1\ndtype: f32\nbyte_order: little\nend_header\n";
        fs::write(&p, raw_file(header, &[1.0, f32::INFINITY])).unwrap();
        assert!(matches!(
            load_volume(&p),
            Err(VolumeError::NonFiniteInFile { index: 1, .. })
        ));

        fs::write(&p, raw_file(header, &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(load_volume(&p), Err(VolumeError::TrailingData { .. })));

        let missing = dir.path().join("missing.vol");
        let err = load_volume(&missing).unwrap_err();
        assert!(err.to_string().contains("missing.vol"));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.lbl");
        let l = LabelVolume::from_fn([3, 2, 2], 4, |x, y, z| ((x + y + z) % 4) as u16).unwrap();
        save_labels(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
        assert!(load_volume(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn any_volume_round_trips(
            dims in prop::array::uniform3(1usize..5),
            spacing in prop::array::uniform3(0.01f64..10.0),
            seed in any::<u64>(),
        ) {
            use rand::Rng as _;
            let mut rng = crate::rng::seeded(seed);
            let v = Volume::from_fn(dims, spacing, |_, _, _| rng.gen_range(-1e6f32..1e6)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.vol");
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
