//! Parameter files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! b"HCMP"            magic
//! u32                format version (1)
//! u32                input_dim
//! u32                output_dim
//! u32                number of hidden layers h
//! u32 * h            hidden widths
//! per affine layer:  f64 * (out * in) weight (row-major), f64 * out bias
//! ```
//!
//! The JSON form is `{"version": 1, "params": <MlpParams>}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Layer, MlpParams, MlpSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HCMP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    version: u32,
    params: MlpParams,
}

pub fn to_bytes(params: &MlpParams) -> Vec<u8> {
    let spec = &params.spec;
    let mut out = Vec::with_capacity(24 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        spec.input_dim as u32,
        spec.output_dim as u32,
        spec.hidden_dims.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &h in &spec.hidden_dims {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MlpParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_dim = r.u32()?;
    let output_dim = r.u32()?;
    let hidden = r.u32()?;
    let hidden_dims = (0..hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec {
        input_dim,
        hidden_dims,
        output_dim,
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid layer widths: {e}")))?;
    let mut layers = Vec::new();
    for (o, i) in spec.layer_dims() {
        let weight = Tensor::matrix(o, i, r.f64s(o * i)?)?;
        let bias = Tensor::vector(r.f64s(o)?);
        layers.push(Layer { weight, bias });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(MlpParams { spec, layers })
}

pub fn to_json(params: &MlpParams) -> Result<String> {
    Ok(serde_json::to_string(&JsonCheckpoint {
        version: VERSION,
        params: params.clone(),
    })?)
}

pub fn from_json(s: &str) -> Result<MlpParams> {
    let ck: JsonCheckpoint = serde_json::from_str(s)?;
    if ck.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
    }
    let p = ck.params;
    p.spec.validate()?;
    let dims = p.spec.layer_dims();
    let ok = dims.len() == p.layers.len()
        && dims.iter().zip(&p.layers).all(|(&(o, i), l)| {
            l.weight.shape() == [o, i] && l.bias.shape() == [o]
        });
    if !ok {
        return Err(Error::Checkpoint("layer shapes do not match spec".into()));
    }
    Ok(p)
}

/// Writes JSON when the extension is `.json`, binary otherwise.
pub fn save(params: &MlpParams, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        fs::write(path, to_json(params)?)?;
    } else {
        fs::write(path, to_bytes(params))?;
    }
    Ok(())
}

/// Reads either format, detected from the leading bytes.
pub fn load(path: &Path) -> Result<MlpParams> {
    let buf = fs::read(path)?;
    if buf.starts_with(MAGIC) {
        from_bytes(&buf)
    } else {
        let s = std::str::from_utf8(&buf)
            .map_err(|_| Error::Checkpoint("neither binary nor JSON".into()))?;
        from_json(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> MlpParams {
        MlpParams::init(&MlpSpec::control(4, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let p = sample();
        let q = from_bytes(&to_bytes(&p)).unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(p.spec, q.spec);
    }

    #[test]
    fn json_round_trip() {
        let p = sample();
        let q = from_json(&to_json(&p).unwrap()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = to_bytes(&sample());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }

    #[test]
    fn file_formats_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        for name in ["net.bin", "net.json"] {
            let path = dir.path().join(name);
            save(&p, &path).unwrap();
            assert_eq!(load(&path).unwrap(), p);
        }
    }
}
