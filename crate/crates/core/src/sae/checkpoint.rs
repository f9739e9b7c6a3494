//! SAE checkpoint container.
//!
//! ```text
//! magic "SPSA" | version u32 | d u32 | q u32 | k u32 | dtype u8
//! | w_enc [d × q] | w_dec [q × d] | bias [d] | training_steps u64
//! ```
//!
//! Little-endian throughout. Dead-feature counters are not persisted; a loaded
//! model starts with every counter at zero.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::SaeModel;
use crate::error::{Error, Result};
use crate::store::format::{put_floats, Cursor};
use crate::store::DType;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPSA";
const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &SaeModel, dtype: DType) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} exceeds u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(model.d(), "d")?.to_le_bytes());
    out.extend_from_slice(&to_u32(model.q(), "q")?.to_le_bytes());
    out.extend_from_slice(&to_u32(model.k, "k")?.to_le_bytes());
    out.push(dtype.code());
    put_floats(&mut out, dtype, model.w_enc.iter().copied());
    put_floats(&mut out, dtype, model.w_dec.iter().copied());
    put_floats(&mut out, dtype, model.bias.iter().copied());
    out.extend_from_slice(&model.training_steps.to_le_bytes());
    Ok(out)
}

pub fn read_checkpoint(name: &str, bytes: &[u8]) -> Result<(SaeModel, DType)> {
    let mut cur = Cursor::new(name, bytes);
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(cur.err(0, format!("bad magic {magic:?}, expected \"SPSA\"")));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.err(4, format!("unsupported checkpoint version {version}")));
    }
    let d = cur.u32("d")? as usize;
    let q = cur.u32("q")? as usize;
    if d == 0 || q == 0 || !q.is_multiple_of(d) {
        return Err(cur.err(8, format!("q = {q} is not a positive multiple of d = {d}")));
    }
    let k = cur.u32("k")? as usize;
    if k == 0 {
        return Err(cur.err(16, "k must be positive"));
    }
    let code = cur.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| cur.err(20, format!("unknown dtype {code}")))?;
    let w_enc = cur.floats(dtype, d * q, "w_enc")?;
    let w_dec = cur.floats(dtype, q * d, "w_dec")?;
    let bias = cur.floats(dtype, d, "bias")?;
    let steps = cur.u64("training step counter")?;
    cur.finish()?;
    let mut model = SaeModel::new(
        Array2::from_shape_vec((d, q), w_enc).expect("sized"),
        Array2::from_shape_vec((q, d), w_dec).expect("sized"),
        Array1::from_vec(bias),
        k,
    )?;
    model.training_steps = steps;
    Ok((model, dtype))
}

pub fn save_checkpoint(model: &SaeModel, dtype: DType, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model, dtype)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SaeModel, DType)> {
    let bytes = fs::read(path)?;
    read_checkpoint(&path.display().to_string(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Seeds, SAE_INIT};

    fn model() -> SaeModel {
        let mean = Array1::from_iter((0..4).map(|i| i as f64 * 0.1));
        let mut m = SaeModel::init(4, 2, 2, mean.view(), &mut Seeds::new(2).stream(SAE_INIT)).unwrap();
        m.training_steps = 1234;
        m
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for dtype in [DType::F64, DType::F32] {
            let bytes = write_checkpoint(&model(), dtype).unwrap();
            let (back, dt) = read_checkpoint("ck", &bytes).unwrap();
            assert_eq!(dt, dtype);
            assert_eq!(back.training_steps, 1234);
            assert_eq!(write_checkpoint(&back, dtype).unwrap(), bytes);
        }
        let (back, _) = read_checkpoint("ck", &write_checkpoint(&model(), DType::F64).unwrap()).unwrap();
        assert_eq!(back, model());
    }

    #[test]
    fn corrupt_header_positions() {
        let good = write_checkpoint(&model(), DType::F64).unwrap();
        let mut bad = good.clone();
        bad[2] = b'Z';
        assert!(matches!(
            read_checkpoint("ck", &bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[12..16].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint("ck", &bad),
            Err(Error::Format { offset: 8, .. })
        ));
        let mut bad = good.clone();
        bad[20] = 9;
        assert!(matches!(
            read_checkpoint("ck", &bad),
            Err(Error::Format { offset: 20, .. })
        ));
        assert!(matches!(
            read_checkpoint("ck", &good[..good.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}
