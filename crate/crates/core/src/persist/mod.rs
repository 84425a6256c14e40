//! File formats and corpus ingestion.
//!
//! All binary files share one little-endian container:
//!
//! ```text
//! magic "SASQ" | version u32 | [scale files: bits u8, granularity u8]
//! | tensor count u32 | tensors...
//! tensor: name length u16 | UTF-8 name | dtype u8 (0 = f32, 1 = i32)
//!         | rank u8 | dims u64 × rank | payload
//! ```

pub mod config;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ScaleSet};
use crate::quant::{Granularity, ScaleVector, DEFAULT_SCALE_FLOOR};
use crate::tensor::{FloatTensor, IntTensor, Shape};

pub use config::RunConfig;

pub const MAGIC: [u8; 4] = *b"SASQ";
pub const FORMAT_VERSION: u32 = 1;
const WEIGHT_BITS_KEY: &str = "quant.weight_bits";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(FloatTensor),
    I32(IntTensor),
}

impl StoredTensor {
    fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => 0,
            StoredTensor::I32(_) => 1,
        }
    }

    fn dims(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.dims(),
            StoredTensor::I32(t) => t.dims(),
        }
    }
}

pub type NamedTensors = Vec<(String, StoredTensor)>;

fn encode(header: &[u8], tensors: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(header);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (i, (name, t)) in tensors.iter().enumerate() {
        if tensors[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateName(name.clone()));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::I32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses the container, returning the header bytes between the version
/// and the tensor count (`header_len` of them) and the tensors.
fn decode(buf: &[u8], header_len: usize) -> Result<(Vec<u8>, NamedTensors)> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header = r.take(header_len, "header")?.to_vec();
    let count = r.u32("tensor count")?;
    let mut tensors: NamedTensors = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateName(name));
        }
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dims")?;
            dims.push(usize::try_from(d).map_err(|_| Error::Malformed(format!("{name}: dimension {d} too large")))?);
        }
        let shape = Shape::new(dims).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
        let bytes = shape
            .numel()
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed(format!("{name}: payload size overflows")))?;
        let payload = r.take(bytes, &name)?;
        let words = payload.chunks_exact(4).map(|c| c.try_into().expect("4 bytes"));
        let t = match dtype {
            0 => StoredTensor::F32(FloatTensor::from_vec(shape, words.map(f32::from_le_bytes).collect())?),
            1 => StoredTensor::I32(IntTensor::from_vec(shape, words.map(i32::from_le_bytes).collect())?),
            other => return Err(Error::Malformed(format!("{name}: unknown dtype code {other}"))),
        };
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((header, tensors))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(tensors: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    encode(&[], tensors)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensors> {
    Ok(decode(bytes, 0)?.1)
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, StoredTensor)]) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(tensors)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensors> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

/// Every float parameter, plus the integer weights, weight scales and their
/// bit width when the model has been quantized.
pub fn model_tensors(model: &Model) -> NamedTensors {
    let mut out: NamedTensors = model
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, StoredTensor::F32(t.clone())))
        .collect();
    if let Some(bits) = model.weight_bits() {
        out.push((
            WEIGHT_BITS_KEY.into(),
            StoredTensor::I32(IntTensor::vector(vec![bits as i32]).expect("non-empty")),
        ));
        for (name, l) in model.linear_names().into_iter().zip(model.linears()) {
            if let Some(q) = &l.quantized {
                out.push((format!("{name}.w_int"), StoredTensor::I32(q.quantized.ints.clone())));
                out.push((format!("{name}.s_w"), StoredTensor::F32(q.quantized.scales.values().clone())));
            }
        }
    }
    out
}

/// Rebuilds a model of shape `config` from checkpoint tensors. Stored integer
/// weights are re-derived from the float weights and must match exactly.
pub fn model_from_tensors(config: ModelConfig, tensors: NamedTensors) -> Result<Model> {
    let mut model = Model::new(config, 0)?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut problems = Vec::new();
    {
        let mut params = model.parameters_mut();
        for (name, slot) in names.iter().zip(params.iter_mut()) {
            match tensors.iter().find(|(n, _)| n == name) {
                Some((_, StoredTensor::F32(t))) if t.dims() == slot.dims() => **slot = t.clone(),
                Some((_, StoredTensor::F32(t))) => {
                    problems.push(format!("{name}: shape {:?}, model expects {:?}", t.dims(), slot.dims()))
                }
                Some(_) => problems.push(format!("{name}: expected f32")),
                None => problems.push(format!("{name}: missing")),
            }
        }
    }
    let linear_names = model.linear_names();
    for (n, _) in &tensors {
        let known = names.contains(n)
            || n == WEIGHT_BITS_KEY
            || linear_names
                .iter()
                .any(|l| *n == format!("{l}.w_int") || *n == format!("{l}.s_w"));
        if !known {
            problems.push(format!("{n}: unexpected tensor"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Malformed(format!("checkpoint does not match model: {}", problems.join(", "))));
    }
    let bits = match tensors.iter().find(|(n, _)| n == WEIGHT_BITS_KEY) {
        Some((_, StoredTensor::I32(t))) if t.numel() == 1 => Some(t.data()[0]),
        Some(_) => return Err(Error::Malformed(format!("{WEIGHT_BITS_KEY} must be a single i32"))),
        None => None,
    };
    if let Some(bits) = bits {
        let bits = u8::try_from(bits).map_err(|_| Error::Malformed(format!("weight bits {bits}")))?;
        model.quantize_weights(bits)?;
        for (name, l) in linear_names.iter().zip(model.linears()) {
            let q = l.quantized.as_ref().expect("just quantized");
            let ints = tensors.iter().find(|(n, _)| *n == format!("{name}.w_int"));
            let scales = tensors.iter().find(|(n, _)| *n == format!("{name}.s_w"));
            let ok = matches!(ints, Some((_, StoredTensor::I32(t))) if *t == q.quantized.ints)
                && matches!(scales, Some((_, StoredTensor::F32(t))) if t == q.quantized.scales.values());
            if !ok {
                return Err(Error::Malformed(format!("{name}: stored integer weights do not match float weights")));
            }
        }
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    save_checkpoint(path, &model_tensors(model))
}

pub fn load_model(path: impl AsRef<Path>, config: ModelConfig) -> Result<Model> {
    model_from_tensors(config, load_checkpoint(path)?)
}

pub fn encode_scales(scales: &ScaleSet) -> Result<Vec<u8>> {
    let granularity = scales
        .iter()
        .next()
        .map_or(Granularity::PerChannel, |(_, s)| s.granularity());
    if scales.iter().any(|(_, s)| s.granularity() != granularity) {
        return Err(Error::invalid("scale set mixes granularities"));
    }
    let tensors: NamedTensors = scales
        .iter()
        .map(|(n, s)| (format!("{n}.s_x"), StoredTensor::F32(s.values().clone())))
        .collect();
    encode(&[scales.bits, granularity.code()], &tensors)
}

/// Parses a scale file; every value must be finite and at least the default
/// scale floor.
pub fn decode_scales(bytes: &[u8]) -> Result<ScaleSet> {
    let (header, tensors) = decode(bytes, 2)?;
    let bits = header[0];
    let granularity = Granularity::from_code(header[1])
        .ok_or_else(|| Error::Malformed(format!("unknown granularity code {}", header[1])))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let layer = name
            .strip_suffix(".s_x")
            .ok_or_else(|| Error::Malformed(format!("{name}: scale tensors must be named <layer>.s_x")))?;
        let StoredTensor::F32(values) = t else {
            return Err(Error::Malformed(format!("{name}: scales must be f32")));
        };
        let sv = ScaleVector::new(granularity, values, DEFAULT_SCALE_FLOOR)
            .map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
        entries.push((layer.to_string(), sv));
    }
    ScaleSet::new(bits, entries).map_err(|e| match e {
        Error::DuplicateName(_) => e,
        other => Error::Malformed(other.to_string()),
    })
}

pub fn save_scales(path: impl AsRef<Path>, scales: &ScaleSet) -> Result<()> {
    write_file(path.as_ref(), &encode_scales(scales)?)
}

pub fn load_scales(path: impl AsRef<Path>) -> Result<ScaleSet> {
    decode_scales(&read_file(path.as_ref())?)
}

/// Byte-level tokenization: each byte becomes its own id. NUL bytes are
/// dropped because id 0 is reserved for EOS.
pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().filter(|&&b| b != 0).map(|&b| b as u32).collect()
}

/// Bytes of non-EOS ids below 256, decoded as UTF-8 with lossy replacement.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok().filter(|&b| b != 0))
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let tokens = tokenize(&read_file(path)?);
    if tokens.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(tokens)
}

/// Disjoint contiguous slices of one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<u32>,
    pub calib: Vec<u32>,
    pub valid: Vec<u32>,
}

/// Train prefix, then a calibration slice, then a validation tail, sized by
/// the given fractions of the corpus.
pub fn split_corpus(tokens: &[u32], calib_fraction: f64, valid_fraction: f64) -> Result<CorpusSplit> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(calib_fraction) || !ok(valid_fraction) || calib_fraction + valid_fraction >= 1.0 {
        return Err(Error::invalid("split fractions must be in [0, 1) and sum below 1"));
    }
    let n = tokens.len();
    let valid_len = (n as f64 * valid_fraction).round() as usize;
    let calib_len = (n as f64 * calib_fraction).round() as usize;
    let train_end = n - valid_len - calib_len;
    if train_end == 0 {
        return Err(Error::Empty("training split"));
    }
    Ok(CorpusSplit {
        train: tokens[..train_end].to_vec(),
        calib: tokens[train_end..n - valid_len].to_vec(),
        valid: tokens[n - valid_len..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> NamedTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FloatTensor::from_vec(Shape::new(vec![3, 4, 2]).unwrap(), (0..24).map(|_| rng.gen()).collect()).unwrap();
        let i = IntTensor::from_vec(Shape::vector(5).unwrap(), vec![-128, 0, 127, i32::MIN, i32::MAX]).unwrap();
        vec![("a.weight".into(), StoredTensor::F32(f)), ("b".into(), StoredTensor::I32(i))]
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let t = sample();
        let bytes = encode_checkpoint(&t).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_layout_is_pinned() {
        let t = vec![(
            "x".to_string(),
            StoredTensor::F32(FloatTensor::vector(vec![1.0]).unwrap()),
        )];
        let bytes = encode_checkpoint(&t).unwrap();
        let expected: Vec<u8> = [
            &b"SASQ"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"x",
            &[0, 1],
            &1u64.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let dup = vec![sample()[0].clone(), sample()[0].clone()];
        assert!(matches!(encode_checkpoint(&dup), Err(Error::DuplicateName(_))));
        // Hand-build a duplicate on disk by renaming the second tensor.
        let mut renamed = sample();
        renamed[1].0 = "a.weighX".into();
        let mut bytes = encode_checkpoint(&renamed).unwrap();
        let pos = bytes.windows(8).rposition(|w| w == b"a.weighX").unwrap();
        bytes[pos + 7] = b't';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn model_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg.clone(), 4).unwrap();
        m.quantize_weights(8).unwrap();
        save_model(&path, &m).unwrap();
        let back = load_model(&path, cfg.clone()).unwrap();
        assert_eq!(back, m);
        let mut other = cfg;
        other.d_ff = 32;
        assert!(matches!(load_model(&path, other), Err(Error::Malformed(_))));
    }

    #[test]
    fn scale_round_trip_and_validation() {
        let sv = |v: Vec<f32>| ScaleVector::new(Granularity::PerChannel, FloatTensor::vector(v).unwrap(), 1e-8).unwrap();
        let set = ScaleSet::new(8, vec![("blocks.0.attn.q".into(), sv(vec![0.1, 0.2])), ("head".into(), sv(vec![1e-8]))]).unwrap();
        let bytes = encode_scales(&set).unwrap();
        assert_eq!(decode_scales(&bytes).unwrap(), set);
        assert_eq!(&bytes[8..10], &[8, 2]);

        // Overwrite the last f32 with a sub-floor value.
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&1e-9f32.to_le_bytes());
        assert!(matches!(decode_scales(&bad), Err(Error::Malformed(_))));
    }

    #[test]
    fn corpus_bytes_are_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(load_corpus(&path).unwrap(), vec![97, 98, 99]);
        fs::write(&path, b"a\0b").unwrap();
        assert_eq!(load_corpus(&path).unwrap(), vec![97, 98]);
        assert!(matches!(load_corpus(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn detokenize_is_lossy_utf8() {
        assert_eq!(detokenize(&[104, 105, 0, 300]), "hi");
        assert_eq!(detokenize(&[0xff, 97]), "\u{fffd}a");
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let t: Vec<u32> = (0..100).collect();
        let s = split_corpus(&t, 0.1, 0.2).unwrap();
        assert_eq!((s.train.len(), s.calib.len(), s.valid.len()), (70, 10, 20));
        assert_eq!([s.train, s.calib, s.valid].concat(), t);
        assert!(split_corpus(&t, 0.5, 0.5).is_err());
    }
}
