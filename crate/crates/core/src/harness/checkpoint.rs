//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `GNRLCKPT`, one version byte, a sequence of
//! sections `(tag: u8, len: u64 LE, payload)`, and a CRC32 of everything
//! before it as a little-endian `u32` trailer. All numbers are little-endian;
//! floats are stored as their IEEE-754 bits so a round trip is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::generalist::HistoryEntry;
use crate::numeric::RngState;

pub const MAGIC: &[u8; 8] = b"GNRLCKPT";
pub const VERSION: u8 = 1;

const TAG_CONFIG: u8 = 1;
const TAG_HEADER: u8 = 2;
const TAG_THETA: u8 = 3;
const TAG_PREVIOUS: u8 = 4;
const TAG_LEARNER: u8 = 5;
const TAG_HISTORY: u8 = 6;

/// Everything a trainer needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSnapshot {
    pub params: Vec<f64>,
    pub slots: Vec<Vec<f64>>,
    pub step: u64,
    pub wa: Option<Vec<f64>>,
    pub rngs: Vec<RngState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Config text the run was started from.
    pub config_text: String,
    /// Completed epochs.
    pub epoch: u64,
    pub layout: u64,
    /// Global parameters (the single model for baselines).
    pub theta_g: Vec<f64>,
    pub previous: Option<Vec<f64>>,
    pub learners: Vec<LearnerSnapshot>,
    pub history: Vec<HistoryEntry>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.u64(x.to_bits());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn section(&mut self, tag: u8, payload: Writer) {
        self.u8(tag);
        self.bytes(&payload.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(Error::Corrupt(format!("length {n} at byte {} overruns the file", self.pos - 8)));
        }
        Ok(n as usize)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64().map(f64::from_bits)).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn rng_state(w: &mut Writer, s: &RngState) {
    w.u64(s.seed);
    w.u64(s.stream_id);
    w.u128(s.word_pos);
}

fn encode_learner(l: &LearnerSnapshot) -> Writer {
    let mut w = Writer(Vec::new());
    w.floats(&l.params);
    w.u64(l.slots.len() as u64);
    for s in &l.slots {
        w.floats(s);
    }
    w.u64(l.step);
    match &l.wa {
        Some(b) => {
            w.u8(1);
            w.floats(b);
        }
        None => w.u8(0),
    }
    w.u64(l.rngs.len() as u64);
    for s in &l.rngs {
        rng_state(&mut w, s);
    }
    w
}

fn decode_learner(r: &mut Reader) -> Result<LearnerSnapshot> {
    let params = r.floats()?;
    let n = r.len(8)?;
    let slots = (0..n).map(|_| r.floats()).collect::<Result<_>>()?;
    let step = r.u64()?;
    let wa = match r.u8()? {
        0 => None,
        1 => Some(r.floats()?),
        f => return Err(Error::Corrupt(format!("bad WA flag {f}"))),
    };
    let n = r.len(32)?;
    let rngs = (0..n)
        .map(|_| {
            Ok(RngState {
                seed: r.u64()?,
                stream_id: r.u64()?,
                word_pos: r.u128()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LearnerSnapshot {
        params,
        slots,
        step,
        wa,
        rngs,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u8(VERSION);
        let mut s = Writer(Vec::new());
        s.0.extend_from_slice(self.config_text.as_bytes());
        w.section(TAG_CONFIG, s);
        let mut s = Writer(Vec::new());
        s.u64(self.epoch);
        s.u64(self.layout);
        w.section(TAG_HEADER, s);
        let mut s = Writer(Vec::new());
        s.floats(&self.theta_g);
        w.section(TAG_THETA, s);
        if let Some(p) = &self.previous {
            let mut s = Writer(Vec::new());
            s.floats(p);
            w.section(TAG_PREVIOUS, s);
        }
        for l in &self.learners {
            w.section(TAG_LEARNER, encode_learner(l));
        }
        let mut s = Writer(Vec::new());
        for h in &self.history {
            s.0.extend_from_slice(serde_json::to_string(h).expect("history serializes").as_bytes());
            s.0.push(b'\n');
        }
        w.section(TAG_HISTORY, s);
        let crc = crc32fast::hash(&w.0);
        w.0.extend_from_slice(&crc.to_le_bytes());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 1 + 4 {
            return Err(Error::Corrupt(format!("file of {} bytes is too short", buf.len())));
        }
        if &buf[..8] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        if buf[8] != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: buf[8],
            });
        }
        let (body, trailer) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 9 };
        let mut out = Checkpoint {
            config_text: String::new(),
            epoch: 0,
            layout: 0,
            theta_g: Vec::new(),
            previous: None,
            learners: Vec::new(),
            history: Vec::new(),
        };
        let mut seen_header = false;
        while !r.done() {
            let tag = r.u8()?;
            let payload = r.bytes()?;
            let mut p = Reader { buf: payload, pos: 0 };
            match tag {
                TAG_CONFIG => {
                    out.config_text = String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::Corrupt("config section is not UTF-8".into()))?
                }
                TAG_HEADER => {
                    out.epoch = p.u64()?;
                    out.layout = p.u64()?;
                    seen_header = true;
                }
                TAG_THETA => out.theta_g = p.floats()?,
                TAG_PREVIOUS => out.previous = Some(p.floats()?),
                TAG_LEARNER => out.learners.push(decode_learner(&mut p)?),
                TAG_HISTORY => {
                    let text = std::str::from_utf8(payload)
                        .map_err(|_| Error::Corrupt("history section is not UTF-8".into()))?;
                    out.history = text
                        .lines()
                        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("history: {e}"))))
                        .collect::<Result<_>>()?;
                }
                t => return Err(Error::Corrupt(format!("unknown section tag {t}"))),
            }
        }
        if !seen_header {
            return Err(Error::Corrupt("missing header section".into()));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generalist::GlobalEvent;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "seed = 3\n".into(),
            epoch: 7,
            layout: 0xdead_beef,
            theta_g: vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300],
            previous: Some(vec![0.3, 0.4, 0.5, 0.6]),
            learners: vec![
                LearnerSnapshot {
                    params: vec![1.0, 2.0, 3.0, 4.0],
                    slots: vec![vec![0.5; 4], vec![0.25; 4]],
                    step: 42,
                    wa: Some(vec![9.0; 4]),
                    rngs: vec![RngState {
                        seed: 1,
                        stream_id: 100,
                        word_pos: (1u128 << 70) + 5,
                    }],
                },
                LearnerSnapshot {
                    params: vec![0.0; 4],
                    slots: vec![],
                    step: 0,
                    wa: None,
                    rngs: vec![],
                },
            ],
            history: vec![HistoryEntry {
                epoch: 6,
                event: GlobalEvent::Ema,
                weights: vec![0.1 + 0.2, 0.7],
            }],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.theta_g[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.history[0].weights[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 9, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { expected: 1, found: 9 })
        ));
    }
}
