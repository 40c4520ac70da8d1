//! MVOL container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MVOL"
//! 4       1     version (1)
//! 5       1     modality (0 = OCT, 1 = OCTA, 2 = OCT2OCTA)
//! 6       10    reserved, zero
//! 16      12    dims L, W, D as little-endian u32
//! 28      4*N   N = L*W*D little-endian f32, L slowest, D fastest
//! ```

use std::fs;
use std::path::Path;

use super::{Modality, Volume};
use crate::error::{Error, Result};

pub const MVOL_MAGIC: [u8; 4] = *b"MVOL";
pub const MVOL_VERSION: u8 = 1;
const HEADER_LEN: usize = 16;
const DIMS_LEN: usize = 12;

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + DIMS_LEN + 4 * vol.len());
    out.extend_from_slice(&MVOL_MAGIC);
    out.push(MVOL_VERSION);
    out.push(vol.modality().code());
    out.extend_from_slice(&[0u8; 10]);
    for n in vol.dims() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in vol.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN + DIMS_LEN {
        return Err(Error::Format(format!(
            "MVOL truncated: {} bytes, header needs {}",
            bytes.len(),
            HEADER_LEN + DIMS_LEN
        )));
    }
    if bytes[0..4] != MVOL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != MVOL_VERSION {
        return Err(Error::Format(format!(
            "unsupported MVOL version {} (expected {MVOL_VERSION})",
            bytes[4]
        )));
    }
    let modality =
        Modality::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown modality code {}", bytes[5])))?;
    let mut dims = [0usize; 3];
    for (a, dim) in dims.iter_mut().enumerate() {
        let off = HEADER_LEN + 4 * a;
        *dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {dims:?}")));
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let body = &bytes[HEADER_LEN + DIMS_LEN..];
    if body.len() != 4 * n {
        return Err(Error::Format(format!(
            "dims {dims:?} need {} payload bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, values, modality)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(vol)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.mvol");
        let v = Volume::filled([4, 4, 4], 0.0, Modality::Oct).unwrap();
        write_volume(&v, &p).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn seeded_random_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let vals: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.random::<f32>()).collect();
        let v = Volume::new([16, 16, 16], vals.clone(), Modality::Octa).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes).unwrap();
        for (a, b) in vals.iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let v = Volume::filled([2, 3, 5], 1.0, Modality::Oct2Octa).unwrap();
        let b = encode_volume(&v);
        assert_eq!(&b[0..4], b"MVOL");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert!(b[6..16].iter().all(|&x| x == 0));
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[24..28], &5u32.to_le_bytes());
        assert_eq!(b.len(), 28 + 4 * 30);
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn malformed_inputs() {
        let v = Volume::filled([2, 2, 2], 0.5, Modality::Oct).unwrap();
        let good = encode_volume(&v);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_volume(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[5] = 7;
        assert!(matches!(decode_volume(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_volume(&bad), Err(Error::Format(_))));

        assert!(matches!(decode_volume(&good[..10]), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[28..32].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(matches!(decode_volume(&bad), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn any_valid_volume_round_trips(
            dims in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
            code in 0u8..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = dims.0 * dims.1 * dims.2;
            let vals: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
            let v = Volume::new([dims.0, dims.1, dims.2], vals, Modality::from_code(code).unwrap()).unwrap();
            prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        }
    }
}
