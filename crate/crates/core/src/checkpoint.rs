//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SCFLOWCK"
//! version    u32
//! kind       u8       1 = teacher, 2 = distillation
//! arch       u32 length + JSON text
//! iter       u64
//! rng        32-byte seed, u64 stream, u128 word position
//! sets       u32 count, then per set: name, u32 block count, blocks
//! optimizers u32 count, then per optimizer: name, u64 step,
//!            beta1/beta2/eps as f64, first-moment set, second-moment set
//! crc32      u32 over every preceding byte
//! ```
//!
//! A name is a u16 length plus UTF-8 bytes. A block is a name, a u8 rank,
//! u64 dims and the f64 values. A JSON sidecar with the same stem describes
//! the architecture and block shapes for inspection; loading never reads it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamSet, Tensor};
use crate::distill::DistillState;
use crate::error::{Error, Result};
use crate::flow::TeacherState;
use crate::networks::{DiscArch, Discriminator, VelocityArch, VelocityNet};

pub const MAGIC: &[u8; 8] = b"SCFLOWCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Teacher,
    Distill,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Teacher => 1,
            Kind::Distill => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Kind::Teacher),
            2 => Ok(Kind::Distill),
            _ => Err(Error::Checkpoint(format!("unknown checkpoint kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub velocity: VelocityArch,
    pub disc: Option<DiscArch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub arch: ArchDescriptor,
    pub iter: u64,
    pub rng: ChaCha8Rng,
    /// Teacher checkpoints hold `net`; distillation checkpoints hold
    /// `teacher`, `student`, `ema` and `disc`.
    pub params: BTreeMap<String, ParamSet>,
    pub optimizers: BTreeMap<String, AdamState>,
}

fn take(map: &mut BTreeMap<String, ParamSet>, name: &str) -> Result<ParamSet> {
    map.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter set `{name}`")))
}

fn take_opt(map: &mut BTreeMap<String, AdamState>, name: &str) -> Result<AdamState> {
    map.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{name}`")))
}

impl Checkpoint {
    pub fn from_teacher(st: &TeacherState) -> Self {
        Self {
            kind: Kind::Teacher,
            arch: ArchDescriptor {
                velocity: st.net.arch.clone(),
                disc: None,
            },
            iter: st.iter,
            rng: st.rng.clone(),
            params: [("net".to_string(), st.net.params.clone())].into(),
            optimizers: [("net".to_string(), st.opt.clone())].into(),
        }
    }

    pub fn from_distill(st: &DistillState) -> Self {
        Self {
            kind: Kind::Distill,
            arch: ArchDescriptor {
                velocity: st.student.arch.clone(),
                disc: Some(st.disc.arch.clone()),
            },
            iter: st.iter,
            rng: st.rng.clone(),
            params: [
                ("teacher".to_string(), st.teacher.params.clone()),
                ("student".to_string(), st.student.params.clone()),
                ("ema".to_string(), st.ema.params.clone()),
                ("disc".to_string(), st.disc.params.clone()),
            ]
            .into(),
            optimizers: [
                ("student".to_string(), st.opt_student.clone()),
                ("disc".to_string(), st.opt_disc.clone()),
            ]
            .into(),
        }
    }

    pub fn into_teacher(mut self) -> Result<TeacherState> {
        if self.kind != Kind::Teacher {
            return Err(Error::Checkpoint("not a teacher checkpoint".into()));
        }
        let net = VelocityNet::from_params(self.arch.velocity, take(&mut self.params, "net")?)?;
        Ok(TeacherState {
            net,
            opt: take_opt(&mut self.optimizers, "net")?,
            iter: self.iter,
            rng: self.rng,
        })
    }

    pub fn into_distill(mut self) -> Result<DistillState> {
        if self.kind != Kind::Distill {
            return Err(Error::Checkpoint("not a distillation checkpoint".into()));
        }
        let arch = self.arch.velocity;
        let disc_arch = self
            .arch
            .disc
            .ok_or_else(|| Error::Checkpoint("distillation checkpoint without discriminator".into()))?;
        Ok(DistillState {
            teacher: VelocityNet::from_params(arch.clone(), take(&mut self.params, "teacher")?)?,
            student: VelocityNet::from_params(arch.clone(), take(&mut self.params, "student")?)?,
            ema: VelocityNet::from_params(arch, take(&mut self.params, "ema")?)?,
            disc: Discriminator::from_params(disc_arch, take(&mut self.params, "disc")?)?,
            opt_student: take_opt(&mut self.optimizers, "student")?,
            opt_disc: take_opt(&mut self.optimizers, "disc")?,
            iter: self.iter,
            rng: self.rng,
        })
    }

    /// Velocity net for sampling: the teacher's net, or the named set
    /// (`student` or `ema`) of a distillation checkpoint.
    pub fn net(&self, which: &str) -> Result<VelocityNet> {
        let set = match self.kind {
            Kind::Teacher => "net",
            Kind::Distill => which,
        };
        let params = self
            .params
            .get(set)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("no parameter set `{set}`")))?;
        VelocityNet::from_params(self.arch.velocity.clone(), params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.kind.code());
        let arch = serde_json::to_vec(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.u32(arch.len() as u32);
        w.bytes(&arch);
        w.u64(self.iter);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        w.u32(self.params.len() as u32);
        for (name, set) in &self.params {
            w.name(name)?;
            w.param_set(set)?;
        }
        w.u32(self.optimizers.len() as u32);
        for (name, opt) in &self.optimizers {
            w.name(name)?;
            w.u64(opt.step);
            w.f64(opt.config.beta1);
            w.f64(opt.config.beta2);
            w.f64(opt.config.eps);
            w.param_set(&opt.m)?;
            w.param_set(&opt.v)?;
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        if bytes.len() < 12 + 4 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (file corrupt or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let kind = Kind::from_code(r.u8()?)?;
        let arch_len = r.u32()? as usize;
        let arch: ArchDescriptor =
            serde_json::from_slice(r.bytes(arch_len)?).map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
        let iter = r.u64()?;
        let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.bytes(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut params = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            params.insert(name, r.param_set()?);
        }
        let mut optimizers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let step = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let m = r.param_set()?;
            let v = r.param_set()?;
            optimizers.insert(name, AdamState { config, step, m, v });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            kind,
            arch,
            iter,
            rng,
            params,
            optimizers,
        })
    }

    /// Write the binary file and its JSON sidecar; the binary is written to
    /// a temporary name first and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        std::fs::write(sidecar_path(path), self.sidecar(crc32fast::hash(&bytes[..bytes.len() - 4]))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn sidecar(&self, crc: u32) -> Result<String> {
        let blocks: Vec<serde_json::Value> = self
            .params
            .iter()
            .flat_map(|(set, ps)| {
                ps.iter()
                    .map(move |(name, t)| serde_json::json!({ "set": set, "name": name, "shape": t.shape() }))
            })
            .collect();
        let desc = serde_json::json!({
            "format": "scflow-checkpoint",
            "version": VERSION,
            "kind": self.kind,
            "iter": self.iter,
            "arch": self.arch,
            "blocks": blocks,
            "optimizers": self.optimizers.iter().map(|(k, o)| serde_json::json!({ "name": k, "step": o.step })).collect::<Vec<_>>(),
            "crc32": format!("{crc:08x}"),
        });
        let mut s = serde_json::to_string_pretty(&desc).map_err(|e| Error::Checkpoint(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// `run/student.ckpt` -> `run/student.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::Checkpoint(format!("name too long: {s}")))?;
        self.bytes(&len.to_le_bytes());
        self.bytes(s.as_bytes());
        Ok(())
    }
    fn param_set(&mut self, set: &ParamSet) -> Result<()> {
        self.u32(set.len() as u32);
        for (name, t) in set {
            self.name(name)?;
            self.u8(t.rank() as u8);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &x in t.data() {
                self.f64(x);
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn param_set(&mut self) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for _ in 0..self.u32()? {
            let name = self.name()?;
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
                return Err(Error::Checkpoint(format!("block `{name}` overruns the file")));
            }
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            set.insert(name, Tensor::new(shape, data)?);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand::Rng;

    fn small_cfg() -> RunConfig {
        RunConfig {
            hidden: vec![8, 8],
            disc_hidden: vec![8],
            time_embed_dim: 4,
            batch_size: 8,
            ..RunConfig::default()
        }
    }

    fn distill_ckpt() -> Checkpoint {
        let cfg = small_cfg();
        let mut t = TeacherState::init(&cfg).unwrap();
        t.train_step(&cfg, cfg.dataset_kind().unwrap()).unwrap();
        let mut st = DistillState::init(&cfg, t.net).unwrap();
        crate::distill::continue_distill(&mut st, &cfg, 2).unwrap();
        st.rng.random::<u64>();
        Checkpoint::from_distill(&st)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = distill_ckpt();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let st = back.into_distill().unwrap();
        assert_eq!(Checkpoint::from_distill(&st).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn teacher_round_trip() {
        let cfg = small_cfg();
        let mut t = TeacherState::init(&cfg).unwrap();
        t.train_step(&cfg, cfg.dataset_kind().unwrap()).unwrap();
        let ck = Checkpoint::from_teacher(&t);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().into_teacher().unwrap();
        assert_eq!(back, t);
        assert!(Checkpoint::from_teacher(&t).into_distill().is_err());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = distill_ckpt().to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn corruption_fails_checksum() {
        let mut bytes = distill_ckpt().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = distill_ckpt().to_bytes().unwrap();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.ckpt");
        let ck = distill_ckpt();
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["kind"], "distill");
        assert_eq!(side["version"], VERSION);
        assert!(!path.with_extension("tmp").exists());
    }
}
