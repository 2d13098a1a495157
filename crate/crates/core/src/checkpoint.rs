//! Binary state checkpoints with exact (bit-identical) round-trip.
//!
//! Layout: magic `OBSK1\n`, a length-prefixed JSON header carrying the
//! integer and string metadata, then a little-endian payload of every
//! float (run clock, truncation settings, tensor entries, bond weights),
//! and a SHA-256 digest over everything before it. Floats never pass
//! through text, so reload reproduces the exact bit patterns. Writes go
//! through a temporary file in the target directory plus an atomic rename.

use crate::mps::{MpsError, SuperketMPS, TruncationEngine};
use crate::C64;
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 6] = b"OBSK1\n";

pub type CkptResult<T> = Result<T, CkptError>;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Mps(#[from] MpsError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: u64,
    n_sites: u64,
    phys_dim: u64,
    chi_max: u64,
    engine: String,
    /// (left, phys, right) per site.
    shapes: Vec<(u64, u64, u64)>,
    /// Weight count per bond.
    bond_lens: Vec<u64>,
}

/// A reloaded checkpoint: the state plus the run position it was taken at.
#[derive(Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    pub time_abs: f64,
    pub state: SuperketMPS,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: Sha256::new(),
        }
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Serialize the state and its run position. Atomic: the file appears
/// complete or not at all.
pub fn save_checkpoint(
    path: &Path,
    state: &SuperketMPS,
    config_hash: &str,
    step: usize,
    time_abs: f64,
) -> CkptResult<()> {
    let (tensors, weights) = state.raw_parts();
    let header = Header {
        config_hash: config_hash.to_string(),
        step: step as u64,
        n_sites: tensors.len() as u64,
        phys_dim: (state.local_dim * state.local_dim) as u64,
        chi_max: state.chi_max as u64,
        engine: match state.engine {
            TruncationEngine::Exact => "exact".into(),
            TruncationEngine::Subspace => "subspace".into(),
        },
        shapes: tensors
            .iter()
            .map(|t| {
                let (l, p, r) = t.dim();
                (l as u64, p as u64, r as u64)
            })
            .collect(),
        bond_lens: weights.iter().map(|w| w.len() as u64).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = HashingWriter::new(BufWriter::new(file));
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        write_f64(&mut w, time_abs)?;
        write_f64(&mut w, state.eps_cut)?;
        write_f64(&mut w, state.cumulative_discard)?;
        for t in tensors {
            // Row-major iteration over a standard-layout tensor.
            for v in t.iter() {
                write_f64(&mut w, v.re)?;
                write_f64(&mut w, v.im)?;
            }
        }
        for wts in weights {
            for &v in wts.iter() {
                write_f64(&mut w, v)?;
            }
        }
        let digest = w.hasher.clone().finalize();
        w.inner.write_all(&digest)?;
        w.inner.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CkptResult<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut hasher = Sha256::new();

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CkptError::BadMagic);
    }
    hasher.update(magic);

    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    hasher.update(len_buf);
    let header_len = u64::from_le_bytes(len_buf) as usize;
    if header_len > 1 << 24 {
        return Err(CkptError::Corrupt(format!(
            "header length {header_len} implausible"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    hasher.update(&header_bytes);
    let header: Header = serde_json::from_slice(&header_bytes)?;

    if header.shapes.len() != header.n_sites as usize {
        return Err(CkptError::Corrupt("shape count != site count".into()));
    }
    if header.bond_lens.len() + 1 != header.shapes.len() {
        return Err(CkptError::Corrupt("bond count != sites − 1".into()));
    }

    // Floats arrive in one hashed block.
    let mut hr = HashingReader {
        inner: &mut r,
        hasher: &mut hasher,
    };
    let time_abs = read_f64(&mut hr)?;
    let eps_cut = read_f64(&mut hr)?;
    let cumulative_discard = read_f64(&mut hr)?;

    let mut tensors: Vec<Array3<C64>> = Vec::with_capacity(header.shapes.len());
    for &(l, p, rr) in &header.shapes {
        if p != header.phys_dim {
            return Err(CkptError::Corrupt("inconsistent physical dim".into()));
        }
        let (l, p, rr) = (l as usize, p as usize, rr as usize);
        let mut data = Vec::with_capacity(l * p * rr);
        for _ in 0..l * p * rr {
            let re = read_f64(&mut hr)?;
            let im = read_f64(&mut hr)?;
            data.push(C64::new(re, im));
        }
        let t = Array3::from_shape_vec((l, p, rr), data)
            .map_err(|e| CkptError::Corrupt(e.to_string()))?;
        tensors.push(t);
    }
    let mut weights: Vec<Array1<f64>> = Vec::with_capacity(header.bond_lens.len());
    for &n in &header.bond_lens {
        let mut data = Vec::with_capacity(n as usize);
        for _ in 0..n {
            data.push(read_f64(&mut hr)?);
        }
        weights.push(Array1::from_vec(data));
    }

    let mut stored = [0u8; 32];
    r.read_exact(&mut stored)?;
    let computed = hasher.finalize();
    if stored != computed[..] {
        return Err(CkptError::Corrupt("digest mismatch".into()));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CkptError::Corrupt("trailing bytes after digest".into()));
    }

    let engine = match header.engine.as_str() {
        "exact" => TruncationEngine::Exact,
        "subspace" => TruncationEngine::Subspace,
        other => {
            return Err(CkptError::Corrupt(format!(
                "unknown truncation engine {other:?}"
            )))
        }
    };
    let state = SuperketMPS::from_raw_parts(
        tensors,
        weights,
        header.chi_max as usize,
        eps_cut,
        engine,
        cumulative_discard,
    )?;
    Ok(Checkpoint {
        config_hash: header.config_hash,
        step: header.step as usize,
        time_abs,
        state,
    })
}

struct HashingReader<'a, R: Read> {
    inner: &'a mut R,
    hasher: &'a mut Sha256,
}

impl<R: Read> Read for HashingReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::{run, GateSet, RunLimits};
    use crate::model::LatticeModel;

    fn evolved_state() -> SuperketMPS {
        let m = LatticeModel::from_couplings(4, 3, 1.0, 0.4, 0.05, 0.3).unwrap();
        let cs: Vec<C64> = [0.3, 0.45, 0.4, 0.25]
            .iter()
            .map(|&a| C64::new(a, 0.0))
            .collect();
        let mut s = SuperketMPS::coherent_product_state(
            &cs,
            3,
            24,
            1e-12,
            TruncationEngine::Exact,
        )
        .unwrap();
        let gates = GateSet::build(&m, 0.01, 2).unwrap();
        run(
            &mut s,
            &gates,
            20,
            &[],
            &RunLimits::default(),
            None,
            |_, _, _| Ok(()),
        )
        .unwrap();
        s
    }

    fn bits_equal(a: &SuperketMPS, b: &SuperketMPS) -> bool {
        let (ta, wa) = a.raw_parts();
        let (tb, wb) = b.raw_parts();
        if ta.len() != tb.len() || wa.len() != wb.len() {
            return false;
        }
        for (x, y) in ta.iter().zip(tb) {
            if x.dim() != y.dim() {
                return false;
            }
            for (u, v) in x.iter().zip(y.iter()) {
                if u.re.to_bits() != v.re.to_bits() || u.im.to_bits() != v.im.to_bits() {
                    return false;
                }
            }
        }
        for (x, y) in wa.iter().zip(wb) {
            if x.len() != y.len() {
                return false;
            }
            for (u, v) in x.iter().zip(y.iter()) {
                if u.to_bits() != v.to_bits() {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = evolved_state();
        let dir = tempdir();
        let path = dir.join("state.ckpt");
        save_checkpoint(&path, &s, "cfg-abc123", 20, 0.2).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_hash, "cfg-abc123");
        assert_eq!(loaded.step, 20);
        assert_eq!(loaded.time_abs.to_bits(), 0.2f64.to_bits());
        assert_eq!(loaded.state.chi_max, s.chi_max);
        assert_eq!(loaded.state.engine, s.engine);
        assert_eq!(
            loaded.state.eps_cut.to_bits(),
            s.eps_cut.to_bits()
        );
        assert_eq!(
            loaded.state.cumulative_discard.to_bits(),
            s.cumulative_discard.to_bits()
        );
        assert!(bits_equal(&loaded.state, &s));

        // Saving the reloaded state reproduces the file byte for byte.
        let path2 = dir.join("state2.ckpt");
        save_checkpoint(&path2, &loaded.state, "cfg-abc123", 20, 0.2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corruption_is_detected() {
        let s = evolved_state();
        let dir = tempdir();
        let path = dir.join("state.ckpt");
        save_checkpoint(&path, &s, "cfg", 5, 0.05).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            CkptError::Corrupt(_) | CkptError::Header(_) | CkptError::Mps(_) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }

        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CkptError::BadMagic
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn no_partial_file_on_save_path() {
        // The temp file never lingers next to a completed checkpoint.
        let s = evolved_state();
        let dir = tempdir();
        let path = dir.join("nested").join("state.ckpt");
        save_checkpoint(&path, &s, "cfg", 1, 0.01).unwrap();
        assert!(path.is_file());
        let siblings: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(siblings.len(), 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    fn tempdir() -> std::path::PathBuf {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let dir = std::env::temp_dir().join(format!(
            "obsk-test-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
