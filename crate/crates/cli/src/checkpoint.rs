//! `CARECKPT1` checkpoints: everything needed to resume training or to
//! reproduce forward outputs bit for bit.
//!
//! ```text
//! magic "CARECKPT1"
//! str   config (key=value lines)
//! strs  entity types, strs relation types, strs vocabulary (without <unk>)
//! u64   completed epochs
//! [u8; 32] rng seed, u64 stream, u128 word position
//! f64 x4 adam lr, beta1, beta2, eps
//! u32   metadata pairs, each str key, str value
//! u32   parameter count, each:
//!       str name, u32 rank, u32 x rank dims, u64 adam steps,
//!       f64 x len values, f64 x len first moments, f64 x len second moments
//! ```
//!
//! `str` is a u32 byte length plus UTF-8, `strs` a u32 count plus that many
//! `str`. Everything is little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use care_core::model::RngState;
use care_core::{Adam, CareConfig, CareModel, ParamStore, Parameter, Schema, Tensor, Vocab};

use crate::error::{Failure, Result};

pub const MAGIC: &[u8; 9] = b"CARECKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CareModel,
    pub epoch: u64,
    pub adam: Adam,
    pub metadata: BTreeMap<String, String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }
    fn strs(&mut self, ss: &[String]) {
        self.u32(ss.len());
        ss.iter().for_each(|s| self.str(s));
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Failure {
    Failure::Data(format!("corrupt checkpoint: {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| corrupt(&format!("truncated in {what}")))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt(what))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| corrupt(&format!("{what} is not UTF-8")))
    }
    fn strs(&mut self, what: &str) -> Result<Vec<String>> {
        let n = self.u32(what)?;
        (0..n).map(|_| self.str(what)).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.str(&m.config().to_kv());
        w.strs(m.schema().entity_types());
        w.strs(m.schema().relation_types());
        w.strs(m.vocab().known_tokens());
        w.u64(self.epoch);
        let rng = m.rng_state();
        w.bytes(&rng.seed);
        w.u64(rng.stream);
        w.bytes(&rng.word_pos.to_le_bytes());
        w.f64s(&[self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps]);
        w.u32(self.metadata.len());
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(m.params().len());
        for (_, p) in m.params().iter() {
            w.str(p.name());
            w.u32(p.value().rank());
            p.value().shape().iter().for_each(|&d| w.u32(d));
            w.u64(p.step_count());
            w.f64s(p.value().data());
            w.f64s(p.adam_m());
            w.f64s(p.adam_v());
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(Failure::Data("not a CARECKPT1 checkpoint".into()));
        }
        let config = CareConfig::from_kv(CareConfig::default(), &r.str("config")?)?;
        let schema = Schema::new(r.strs("entity types")?, r.strs("relation types")?)?;
        let vocab = Vocab::from_tokens(r.strs("vocabulary")?);
        let epoch = r.u64("epoch")?;
        let rng_state = RngState {
            seed: r.array("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: u128::from_le_bytes(r.array("rng position")?),
        };
        let adam = Adam {
            lr: r.f64("adam")?,
            beta1: r.f64("adam")?,
            beta2: r.f64("adam")?,
            eps: r.f64("adam")?,
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32("metadata")? {
            metadata.insert(r.str("metadata key")?, r.str("metadata value")?);
        }
        let mut store = ParamStore::new();
        for _ in 0..r.u32("parameter count")? {
            let name = r.str("parameter name")?;
            let rank = r.u32(&name)?;
            let shape = (0..rank).map(|_| r.u32(&name)).collect::<Result<Vec<_>>>()?;
            let step = r.u64(&name)?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(&name))?;
            let value = Tensor::new(shape, r.f64s(len, &name)?)?;
            let m = r.f64s(len, &name)?;
            let v = r.f64s(len, &name)?;
            store.push(Parameter::with_state(name, value, m, v, step)?)?;
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let model = CareModel::from_parts(config, schema, vocab, store, rng_state)?;
        Ok(Self {
            model,
            epoch,
            adam,
            metadata,
        })
    }

    /// Writes through a temporary sibling so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Failure::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Failure::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Failure::Data(msg) => Failure::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
