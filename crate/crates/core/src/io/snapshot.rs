//! Cache-state snapshots.
//!
//! Little-endian binary, values stored as `f64` so a restore is exact:
//!
//! ```text
//! "MCPS" | version u32 = 1 | C u32 | d u32 | toggles u8 | next_seq u64
//! capacities: 3 × u32 (entropy, align, negative)
//! for kind in (entropy, align, negative), for class in 0..C:
//!     count u32
//!     count × slot: seq u64 | pseudo_label u32 | entropy f64
//!                   | has_dist u8 | dist f64 | d × f64 feature | C × f64 probs
//! residual_text C × d f64 | residual_visual C × d f64
//! ```

use std::io::{Read, Write};

use crate::caches::{CacheBank, CacheKind, CacheSlot, CacheToggles, ClassCache};
use crate::error::{Error, Result};
use crate::inference::Engine;
use crate::math::Matrix;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"MCPS";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub bank: CacheBank,
    pub residual_text: Matrix,
    pub residual_visual: Matrix,
}

impl Snapshot {
    pub fn of(engine: &Engine) -> Self {
        Self {
            bank: engine.bank().clone(),
            residual_text: engine.state().residual_text.clone(),
            residual_visual: engine.state().residual_visual.clone(),
        }
    }

    pub fn apply(self, engine: &mut Engine) -> Result<()> {
        engine.restore(self.bank, self.residual_text, self.residual_visual)
    }
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 8);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        Ok(self.0.write_all(&buf)?)
    }
}

pub fn write_snapshot<W: Write>(w: W, snap: &Snapshot) -> Result<()> {
    let bank = &snap.bank;
    let mut o = Out(w);
    o.0.write_all(SNAPSHOT_MAGIC)?;
    o.u32(SNAPSHOT_VERSION)?;
    o.u32(bank.classes() as u32)?;
    o.u32(bank.dim() as u32)?;
    let t = bank.toggles();
    o.u8(u8::from(t.entropy) | u8::from(t.align) << 1 | u8::from(t.negative) << 2)?;
    o.u64(bank.next_seq())?;
    for kind in CacheKind::ALL {
        o.u32(bank.class_cache(kind, 0).capacity() as u32)?;
    }
    for kind in CacheKind::ALL {
        for cache in bank.kind_caches(kind) {
            o.u32(cache.len() as u32)?;
            for s in cache.slots() {
                o.u64(s.seq)?;
                o.u32(s.pseudo_label as u32)?;
                o.f64s(&[s.entropy])?;
                o.u8(u8::from(s.dist_to_center.is_some()))?;
                o.f64s(&[s.dist_to_center.unwrap_or(0.0)])?;
                o.f64s(&s.feature)?;
                o.f64s(&s.probs)?;
            }
        }
    }
    o.f64s(snap.residual_text.as_slice())?;
    o.f64s(snap.residual_visual.as_slice())?;
    o.0.flush()?;
    Ok(())
}

struct In<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> In<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.offset, format!("truncated snapshot ({what})")))?;
        self.offset += N as u64;
        Ok(b)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

pub fn read_snapshot<R: Read>(r: R) -> Result<Snapshot> {
    let mut i = In { inner: r, offset: 0 };
    if &i.bytes::<4>("magic")? != SNAPSHOT_MAGIC {
        return Err(Error::format(0, "bad snapshot magic, expected \"MCPS\""));
    }
    let version = i.u32("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::format(4, format!("unsupported snapshot version {version}")));
    }
    let classes = i.u32("class count")? as usize;
    let dim = i.u32("dimension")? as usize;
    if classes == 0 || dim == 0 || classes > 1 << 16 || dim > 1 << 16 {
        return Err(Error::format(8, "bad snapshot shape"));
    }
    let bits = i.u8("toggles")?;
    if bits > 7 {
        return Err(Error::format(16, "bad toggle bits"));
    }
    let toggles = CacheToggles {
        entropy: bits & 1 != 0,
        align: bits & 2 != 0,
        negative: bits & 4 != 0,
    };
    let next_seq = i.u64("sequence counter")?;
    let mut caps = [0usize; 3];
    for c in &mut caps {
        *c = i.u32("capacity")? as usize;
        if *c == 0 || *c > 1 << 16 {
            return Err(Error::format(i.offset - 4, "bad cache capacity"));
        }
    }
    let mut kinds: Vec<Vec<ClassCache>> = Vec::with_capacity(3);
    for cap in caps {
        let mut per_class = Vec::with_capacity(classes);
        for _ in 0..classes {
            let at = i.offset;
            let count = i.u32("slot count")? as usize;
            if count > cap {
                return Err(Error::format(at, format!("{count} slots exceed capacity {cap}")));
            }
            let mut slots = Vec::with_capacity(count);
            for _ in 0..count {
                let seq = i.u64("slot")?;
                let at = i.offset;
                let pseudo_label = i.u32("slot")? as usize;
                if pseudo_label >= classes {
                    return Err(Error::format(at, "pseudo-label out of range"));
                }
                let entropy = i.f64("slot")?;
                let has_dist = i.u8("slot")? != 0;
                let dist = i.f64("slot")?;
                let feature = i.f64s(dim, "slot feature")?;
                let probs = i.f64s(classes, "slot probabilities")?;
                slots.push(CacheSlot {
                    feature,
                    entropy,
                    pseudo_label,
                    probs,
                    dist_to_center: has_dist.then_some(dist),
                    seq,
                });
            }
            per_class.push(ClassCache::from_parts(cap, slots));
        }
        kinds.push(per_class);
    }
    let rt = i.f64s(classes * dim, "text residual")?;
    let rv = i.f64s(classes * dim, "visual residual")?;
    let mut extra = [0u8; 1];
    if i.inner.read(&mut extra)? != 0 {
        return Err(Error::format(i.offset, "trailing bytes after snapshot"));
    }
    let negative = kinds.pop().expect("3 kinds");
    let align = kinds.pop().expect("3 kinds");
    let entropy = kinds.pop().expect("3 kinds");
    Ok(Snapshot {
        bank: CacheBank::from_parts(classes, dim, [entropy, align, negative], toggles, next_seq),
        residual_text: Matrix::from_vec(classes, dim, rt)?,
        residual_visual: Matrix::from_vec(classes, dim, rv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{EngineConfig, Mode};
    use crate::io::synth::{synth_in_memory, SynthSpec};

    fn trained() -> (Engine, Vec<crate::io::SampleRecord>) {
        let (h, recs) = synth_in_memory(&SynthSpec {
            classes: 3,
            dim: 8,
            samples: 80,
            views: 4,
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = EngineConfig {
            mode: Mode::McpPlusPlus,
            persist_residuals: true,
            ..EngineConfig::default()
        };
        let mut e = Engine::from_prompts(&h.prompts, cfg).unwrap();
        for r in &recs[..60] {
            e.predict(&r.views).unwrap();
        }
        (e, recs)
    }

    #[test]
    fn round_trip_is_exact_and_resumes_identically() {
        let (engine, recs) = trained();
        let snap = Snapshot::of(&engine);
        let mut bytes = Vec::new();
        write_snapshot(&mut bytes, &snap).unwrap();
        let back = read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(back.residual_text, snap.residual_text);
        assert_eq!(back.residual_visual, snap.residual_visual);
        for kind in CacheKind::ALL {
            assert_eq!(back.bank.kind_caches(kind), snap.bank.kind_caches(kind));
        }
        let mut again = Vec::new();
        write_snapshot(&mut again, &back).unwrap();
        assert_eq!(again, bytes);

        // A restored engine classifies the rest of the stream like the original.
        let mut restored = Engine::new(engine.state().text.clone(), engine.config().clone()).unwrap();
        back.apply(&mut restored).unwrap();
        for r in &recs[60..] {
            let a = restored.classify(r.views.row(0)).unwrap();
            let b = engine.classify(r.views.row(0)).unwrap();
            assert_eq!(a.pred, b.pred);
            assert_eq!(a.fused, b.fused);
        }
    }

    #[test]
    fn truncated_snapshot_reports_offset() {
        let (engine, _) = trained();
        let mut bytes = Vec::new();
        write_snapshot(&mut bytes, &Snapshot::of(&engine)).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            match read_snapshot(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_snapshot(long.as_slice()).is_err());
    }
}
