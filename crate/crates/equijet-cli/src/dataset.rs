//! Binary event-dataset files: a fixed header followed by variable-length
//! event records, every field validated on read with byte-offset errors.

use anyhow::{bail, Context, Result};
use equijet_core::datagen::{Track, MAX_TRACKS, N_PTYPES};
use equijet_core::{JetEvent, Vec3};
use std::path::Path;

const MAGIC: &[u8; 8] = b"EQJTDATA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const EVENT_FIXED: usize = 1 + 1 + 24;
const TRACK_LEN: usize = 24 + 24 + 1 + 1;

fn put_vec3(out: &mut Vec<u8>, v: Vec3) {
    out.extend_from_slice(&v.x.to_le_bytes());
    out.extend_from_slice(&v.y.to_le_bytes());
    out.extend_from_slice(&v.z.to_le_bytes());
}

/// Serializes events to the dataset byte format.
pub fn encode_dataset(events: &[JetEvent]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + events.len() * (EVENT_FIXED + 12 * TRACK_LEN));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        out.push(e.label);
        out.push(e.tracks.len() as u8);
        put_vec3(&mut out, e.jet_p);
        for t in &e.tracks {
            put_vec3(&mut out, t.p);
            put_vec3(&mut out, t.a);
            out.push(t.q as u8);
            out.push(t.ptype);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            bail!(
                "dataset truncated at byte {}: needed {n} more bytes for {what}, \
                 file has {}",
                self.at,
                self.bytes.len()
            );
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn byte(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.at;
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().expect("len 8"));
        if !v.is_finite() {
            bail!("non-finite {what} at byte {at}");
        }
        Ok(v)
    }

    fn vec3(&mut self, what: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }
}

/// Parses dataset bytes, validating every field.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<JetEvent>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        bail!("not a dataset file (bad magic at byte 0)");
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("len 4"));
    if version != VERSION {
        bail!("unsupported dataset version {version} (expected {VERSION})");
    }
    let count = u64::from_le_bytes(r.take(8, "event count")?.try_into().expect("len 8")) as usize;

    let mut events = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let at = r.at;
        let label = r.byte("event label")?;
        if label > 1 {
            bail!("event {i}: invalid label {label} at byte {at}");
        }
        let n_tracks = r.byte("track count")? as usize;
        if n_tracks == 0 || n_tracks > MAX_TRACKS {
            bail!("event {i}: invalid track count {n_tracks} at byte {}", at + 1);
        }
        let jet_p = r.vec3("jet momentum")?;
        if jet_p.norm() == 0.0 {
            bail!("event {i}: zero jet momentum at byte {}", at + 2);
        }
        let mut tracks = Vec::with_capacity(n_tracks);
        for k in 0..n_tracks {
            let t_at = r.at;
            let p = r.vec3("track momentum")?;
            let a = r.vec3("impact vector")?;
            let q = r.byte("charge")? as i8;
            if !(-1..=1).contains(&q) {
                bail!("event {i} track {k}: invalid charge {q} at byte {}", t_at + 48);
            }
            let ptype = r.byte("particle type")?;
            if ptype as usize >= N_PTYPES {
                bail!(
                    "event {i} track {k}: invalid particle type {ptype} at byte {}",
                    t_at + 49
                );
            }
            tracks.push(Track { p, a, q, ptype });
        }
        events.push(JetEvent { jet_p, label, tracks });
    }
    if r.at != bytes.len() {
        bail!(
            "dataset has {} trailing bytes after the last declared event (byte {})",
            bytes.len() - r.at,
            r.at
        );
    }
    Ok(events)
}

/// Writes events to a dataset file.
pub fn write_dataset(path: &Path, events: &[JetEvent]) -> Result<()> {
    std::fs::write(path, encode_dataset(events))
        .with_context(|| format!("writing dataset {}", path.display()))
}

/// Reads and validates a dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<JetEvent>> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    decode_dataset(&bytes).with_context(|| format!("parsing dataset {}", path.display()))
}
