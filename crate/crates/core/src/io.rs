//! DAVOL1 volume files.
//!
//! Layout: the 8-byte magic `DAVOL1\0\0`, one UTF-8 JSON header line
//! `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32le"}` terminated by
//! `\n`, then `nx*ny*nz` little-endian IEEE-754 binary32 values, x fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const MAGIC: &[u8; 8] = b"DAVOL1\0\0";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

pub fn encode_volume(vol: &Volume3D) -> Vec<u8> {
    let header = Header {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype: DTYPE.to_string(),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + 4 * vol.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume3D> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format("bad magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format("header line is not terminated".into()))?;
    let line = std::str::from_utf8(&rest[..nl]).map_err(|e| format(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(line).map_err(|e| format(format!("bad header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format("dims overflow".into()))?;
    let payload = &rest[nl + 1..];
    let expected = n * 4;
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(header.dims, header.spacing, data).map_err(|e| format(e.to_string()))
}

pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_volume(vol)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.davol");
        let v = Volume3D::zeros([2, 2, 2], [1.0, 1.5, 2.0]).unwrap();
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn random_16_cube_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.random_range(-1e3..1e3)).collect();
        let v = Volume3D::new([16; 3], [0.7, 1.0, 1.3], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.davol");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        let max_diff = v
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max_diff, 0.0);
        assert!(v
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn short_payload_is_truncation() {
        let v = Volume3D::zeros([3, 4, 5], [1.0; 3]).unwrap();
        let mut bytes = encode_volume(&v);
        bytes.truncate(bytes.len() - 4);
        let err = decode_volume(&bytes, Path::new("x")).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Truncated {
                    expected: 240,
                    found: 236,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn bad_magic_and_header() {
        let v = Volume3D::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let mut bytes = encode_volume(&v);
        bytes[0] = b'X';
        assert!(matches!(
            decode_volume(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));

        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(b"{\"dims\":[1,1,1],\"spacing\":[1,1,1],\"dtype\":\"f64le\"}\n");
        bad.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_volume(&bad, Path::new("x")), Err(Error::Format { .. })));

        let mut open = MAGIC.to_vec();
        open.extend_from_slice(b"{\"dims\":");
        assert!(matches!(
            decode_volume(&open, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_finite_data_round_trips(
            dims in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            let n = dims.0 * dims.1 * dims.2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n)
                .map(|_| loop {
                    let f = f32::from_bits(rng.random());
                    if f.is_finite() { break f; }
                })
                .collect();
            let v = Volume3D::new([dims.0, dims.1, dims.2], [1.0, 2.0, 0.5], data).unwrap();
            let back = decode_volume(&encode_volume(&v), Path::new("p")).unwrap();
            prop_assert!(v.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.spacing(), v.spacing());
        }
    }
}
