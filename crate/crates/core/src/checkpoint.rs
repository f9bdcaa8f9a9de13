//! Binary checkpoint format (little endian).
//!
//! ```text
//! magic "WRFGSCK1" | u32 version | u8 task
//! u32 len | config text (UTF-8, canonical key = value)
//! bounds min[3] max[3] f64 | rx position[3] rotation[9 row-major] f64
//! u64 optimizer steps | u64 iteration
//! rng: seed[32] | u64 stream | u128 word position
//! u32 parameter count, then per parameter:
//!   u16 len | name | u32 rows | u32 cols | u8 group | u8 per_gaussian
//!   value[rows*cols] m[..] v[..] f64
//! u32 n | accum[n] f64 | count[n] u32 | mu_grad[3n] f64 | max_radius[n] f64
//! sha256 of everything above (32 bytes)
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::params::{Param, ParamGroup, ParamStore};
use crate::projection::RxPose;
use crate::scene::{Bounds, GradStats, WrfModel};
use crate::tasks::{TaskKind, TrainedModel};
use crate::train::config::TrainConfig;
use crate::train::trainer::{Checkpoint, TrainerState};

pub const MAGIC: &[u8; 8] = b"WRFGSCK1";
pub const VERSION: u32 = 1;

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.write_f64::<LE>(x).unwrap();
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let tm = &ck.trained;
    let m = &tm.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u8(tm.task.code()).unwrap();
    let text = tm.config.to_text();
    out.write_u32::<LE>(text.len() as u32).unwrap();
    out.extend_from_slice(text.as_bytes());
    put_f64s(&mut out, m.bounds.min.as_slice());
    put_f64s(&mut out, m.bounds.max.as_slice());
    put_f64s(&mut out, m.rx.position.as_slice());
    put_f64s(&mut out, m.rx.rotation.transpose().as_slice());
    out.write_u64::<LE>(m.store.step_count).unwrap();
    out.write_u64::<LE>(ck.state.iteration).unwrap();
    out.extend_from_slice(&ck.state.rng.get_seed());
    out.write_u64::<LE>(ck.state.rng.get_stream()).unwrap();
    out.write_u128::<LE>(ck.state.rng.get_word_pos()).unwrap();
    out.write_u32::<LE>(m.store.params.len() as u32).unwrap();
    for p in &m.store.params {
        out.write_u16::<LE>(p.name.len() as u16).unwrap();
        out.extend_from_slice(p.name.as_bytes());
        out.write_u32::<LE>(p.rows as u32).unwrap();
        out.write_u32::<LE>(p.cols as u32).unwrap();
        out.write_u8(p.group.code()).unwrap();
        out.write_u8(p.per_gaussian as u8).unwrap();
        put_f64s(&mut out, &p.value);
        put_f64s(&mut out, &p.m);
        put_f64s(&mut out, &p.v);
    }
    let s = &ck.state.stats;
    out.write_u32::<LE>(s.len() as u32).unwrap();
    put_f64s(&mut out, &s.accum);
    for &c in &s.count {
        out.write_u32::<LE>(c).unwrap();
    }
    for g in &s.mu_grad {
        put_f64s(&mut out, g.as_slice());
    }
    put_f64s(&mut out, &s.max_radius);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    c: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, m: &str) -> Error {
        Error::corrupt(self.path, format!("{m} at byte {}", self.c.position()))
    }

    fn u8(&mut self) -> Result<u8> {
        self.c.read_u8().map_err(|_| self.err("truncated"))
    }
    fn u16(&mut self) -> Result<u16> {
        self.c.read_u16::<LE>().map_err(|_| self.err("truncated"))
    }
    fn u32(&mut self) -> Result<u32> {
        self.c.read_u32::<LE>().map_err(|_| self.err("truncated"))
    }
    fn u64(&mut self) -> Result<u64> {
        self.c.read_u64::<LE>().map_err(|_| self.err("truncated"))
    }
    fn u128(&mut self) -> Result<u128> {
        self.c.read_u128::<LE>().map_err(|_| self.err("truncated"))
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.c.get_ref().len() - self.c.position() as usize;
        if n > remaining {
            return Err(self.err("truncated"));
        }
        let mut b = vec![0; n];
        self.c.read_exact(&mut b).map_err(|_| self.err("truncated"))?;
        Ok(b)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?).map_err(|_| self.err("invalid UTF-8"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::corrupt(path, "not a checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::corrupt(path, "checksum mismatch"));
    }
    let mut r = Reader { c: Cursor::new(body), path };
    r.bytes(MAGIC.len())?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let task = TaskKind::from_code(r.u8()?).ok_or_else(|| r.err("unknown task"))?;
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    let config = TrainConfig::parse(&text, &format!("{} (embedded config)", path.display()))?;
    let b = r.f64s(6)?;
    let bounds = Bounds::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]))?;
    let position = Vector3::from_column_slice(&r.f64s(3)?);
    let rotation = Matrix3::from_row_slice(&r.f64s(9)?);
    let step_count = r.u64()?;
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    let count = r.u32()? as usize;
    let mut store = ParamStore { params: Vec::with_capacity(count), step_count };
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let group = ParamGroup::from_code(r.u8()?).ok_or_else(|| r.err("unknown parameter group"))?;
        let per_gaussian = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(r.err("bad flag")),
        };
        let n = rows.checked_mul(cols).ok_or_else(|| r.err("parameter size overflow"))?;
        let (value, m, v) = (r.f64s(n)?, r.f64s(n)?, r.f64s(n)?);
        if store.find(&name).is_some() {
            return Err(r.err(&format!("duplicate parameter {name}")));
        }
        store.params.push(Param { name, rows, cols, group, per_gaussian, value, grad: vec![0.0; n], m, v });
    }
    let n = r.u32()? as usize;
    let accum = r.f64s(n)?;
    let mut count = Vec::with_capacity(n);
    for _ in 0..n {
        count.push(r.u32()?);
    }
    let mu_grad = r.f64s(3 * n)?.chunks(3).map(Vector3::from_column_slice).collect();
    let max_radius = r.f64s(n)?;
    if (r.c.position() as usize) != body.len() {
        return Err(r.err("trailing bytes"));
    }
    let model_cfg = config.model_config(task.d_sig(), task.conditioning());
    let model = WrfModel::from_store(model_cfg, bounds, RxPose { position, rotation }, store)?;
    if model.gaussian_count() != n {
        return Err(Error::corrupt(path, "density statistics do not match the Gaussian count"));
    }
    Ok(Checkpoint {
        trained: TrainedModel { task, config, model },
        state: TrainerState { iteration, rng, stats: GradStats { accum, count, mu_grad, max_radius } },
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    io::write_file(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&io::read_file(path)?, path)
}
