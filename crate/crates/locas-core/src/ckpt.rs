//! Binary checkpoint container shared by backbone and memory snapshots.
//!
//! Layout (all integers little-endian):
//!   magic `LOCA` · u32 version (=1)
//!   config block: u32 field count, then per field
//!     u32 name length · UTF-8 name · u64 value
//!   tensor block: u32 tensor count, then per tensor
//!     u32 name length · UTF-8 name · u64 rows · u64 cols · rows·cols f64
//!
//! Round-trips are bit-exact. Memory tensors carry the `locas.` prefix.

use std::fs;
use std::path::Path;

use crate::backbone::{Backbone, BackboneWeights, FfnKind, FfnWeights, LayerWeights, ModelConfig};
use crate::error::{LocasError, Result};
use crate::memory::{GluMemoryLayer, LocasGluMemory, LocasMlpMemory, MlpMemoryLayer};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"LOCA";
const VERSION: u32 = 1;

// ── Writer ───────────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer { buf }
    }

    fn fields(&mut self, fields: &[(&str, u64)]) {
        self.buf.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        for (name, value) in fields {
            self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            self.buf.extend_from_slice(name.as_bytes());
            self.buf.extend_from_slice(&value.to_le_bytes());
        }
    }

    fn tensor_count(&mut self, n: usize) {
        self.buf.extend_from_slice(&(n as u32).to_le_bytes());
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) {
        debug_assert_eq!(data.len(), rows * cols);
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.extend_from_slice(&(rows as u64).to_le_bytes());
        self.buf.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn matrix(&mut self, name: &str, m: &Matrix) {
        self.tensor(name, m.rows(), m.cols(), m.data());
    }
}

// ── Reader ───────────────────────────────────────────────────────────

struct Reader {
    buf: Vec<u8>,
    at: usize,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut r = Reader { buf, at: 0 };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(LocasError::Format("bad magic bytes (not a checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LocasError::Format(format!(
                "checkpoint version {version} unsupported (this build reads version {VERSION})"
            )));
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(LocasError::Format("truncated checkpoint".into()));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| LocasError::Format("non-UTF-8 name in checkpoint".into()))
    }

    fn fields(&mut self) -> Result<Vec<(String, u64)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let name = self.name()?;
            let value = self.u64()?;
            out.push((name, value));
        }
        Ok(out)
    }

    fn tensor(&mut self) -> Result<(String, Matrix)> {
        let name = self.name()?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            LocasError::Format(format!("tensor '{name}' shape overflows"))
        })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()));
        }
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| LocasError::Format(format!("tensor '{name}': {e}")))?;
        Ok((name, m))
    }

    fn expect_tensor(&mut self, want: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let (name, m) = self.tensor()?;
        if name != want {
            return Err(LocasError::Format(format!("expected tensor '{want}', found '{name}'")));
        }
        if m.rows() != rows || m.cols() != cols {
            return Err(LocasError::Format(format!(
                "tensor '{name}': expected {rows}x{cols}, found {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }
}

fn field(fields: &[(String, u64)], name: &str) -> Result<u64> {
    fields
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| LocasError::Format(format!("missing config field '{name}'")))
}

// ── Backbone checkpoints ─────────────────────────────────────────────

pub fn save_backbone(bb: &Backbone, path: &Path) -> Result<()> {
    let cfg = &bb.cfg;
    let mut w = Writer::new();
    w.fields(&[
        ("layers", cfg.layers as u64),
        ("d_model", cfg.d_model as u64),
        ("d_ff", cfg.d_ff as u64),
        ("heads", cfg.heads as u64),
        ("vocab", cfg.vocab as u64),
        ("ffn_kind", matches!(cfg.ffn_kind, FfnKind::Glu) as u64),
        ("max_seq", cfg.max_seq as u64),
    ]);
    let per_layer = match cfg.ffn_kind {
        FfnKind::Mlp => 8,
        FfnKind::Glu => 9,
    };
    w.tensor_count(2 + cfg.layers * per_layer + 1);
    w.matrix("embed", &bb.weights.embed);
    for (i, l) in bb.weights.layers.iter().enumerate() {
        w.matrix(&format!("layer{i}.wq"), &l.wq);
        w.matrix(&format!("layer{i}.wk"), &l.wk);
        w.matrix(&format!("layer{i}.wv"), &l.wv);
        w.matrix(&format!("layer{i}.wo"), &l.wo);
        w.tensor(&format!("layer{i}.norm_attn"), 1, l.norm_attn.len(), &l.norm_attn);
        w.tensor(&format!("layer{i}.norm_ffn"), 1, l.norm_ffn.len(), &l.norm_ffn);
        match &l.ffn {
            FfnWeights::Mlp { key, value } => {
                w.matrix(&format!("layer{i}.ffn.key"), key);
                w.matrix(&format!("layer{i}.ffn.value"), value);
            }
            FfnWeights::Glu { gate, key, down } => {
                w.matrix(&format!("layer{i}.ffn.gate"), gate);
                w.matrix(&format!("layer{i}.ffn.key"), key);
                w.matrix(&format!("layer{i}.ffn.down"), down);
            }
        }
    }
    w.tensor("norm_final", 1, bb.weights.norm_final.len(), &bb.weights.norm_final);
    w.matrix("head", &bb.weights.head);
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let mut r = Reader::open(path)?;
    let fields = r.fields()?;
    let cfg = ModelConfig {
        layers: field(&fields, "layers")? as usize,
        d_model: field(&fields, "d_model")? as usize,
        d_ff: field(&fields, "d_ff")? as usize,
        heads: field(&fields, "heads")? as usize,
        vocab: field(&fields, "vocab")? as usize,
        ffn_kind: if field(&fields, "ffn_kind")? == 1 { FfnKind::Glu } else { FfnKind::Mlp },
        max_seq: field(&fields, "max_seq")? as usize,
    };
    cfg.validate().map_err(|e| LocasError::Format(format!("invalid checkpoint config: {e}")))?;
    let expected = 2 + cfg.layers * if cfg.ffn_kind == FfnKind::Glu { 9 } else { 8 } + 1;
    let count = r.u32()? as usize;
    if count != expected {
        return Err(LocasError::Format(format!(
            "expected {expected} tensors, checkpoint declares {count}"
        )));
    }
    let (d, m, vocab) = (cfg.d_model, cfg.d_ff, cfg.vocab);
    let embed = r.expect_tensor("embed", vocab, d)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let wq = r.expect_tensor(&format!("layer{i}.wq"), d, d)?;
        let wk = r.expect_tensor(&format!("layer{i}.wk"), d, d)?;
        let wv = r.expect_tensor(&format!("layer{i}.wv"), d, d)?;
        let wo = r.expect_tensor(&format!("layer{i}.wo"), d, d)?;
        let norm_attn = r.expect_tensor(&format!("layer{i}.norm_attn"), 1, d)?.data().to_vec();
        let norm_ffn = r.expect_tensor(&format!("layer{i}.norm_ffn"), 1, d)?.data().to_vec();
        let ffn = match cfg.ffn_kind {
            FfnKind::Mlp => FfnWeights::Mlp {
                key: r.expect_tensor(&format!("layer{i}.ffn.key"), m, d)?,
                value: r.expect_tensor(&format!("layer{i}.ffn.value"), m, d)?,
            },
            FfnKind::Glu => FfnWeights::Glu {
                gate: r.expect_tensor(&format!("layer{i}.ffn.gate"), m, d)?,
                key: r.expect_tensor(&format!("layer{i}.ffn.key"), m, d)?,
                down: r.expect_tensor(&format!("layer{i}.ffn.down"), m, d)?,
            },
        };
        layers.push(LayerWeights { wq, wk, wv, wo, norm_attn, norm_ffn, ffn });
    }
    let norm_final = r.expect_tensor("norm_final", 1, d)?.data().to_vec();
    let head = r.expect_tensor("head", vocab, d)?;
    Ok(Backbone { cfg, weights: BackboneWeights { embed, layers, norm_final, head } })
}

// ── Memory checkpoints ───────────────────────────────────────────────

pub enum MemoryCheckpoint {
    Mlp(LocasMlpMemory),
    Glu(LocasGluMemory),
}

pub fn save_mlp_memory(mem: &LocasMlpMemory, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.fields(&[("kind", 0), ("layers", mem.layers.len() as u64)]);
    w.tensor_count(1 + 2 * mem.layers.len());
    w.tensor("locas.epsilon", 1, 1, &[mem.epsilon]);
    for (i, l) in mem.layers.iter().enumerate() {
        w.matrix(&format!("locas.{i}.keys"), &l.keys);
        w.matrix(&format!("locas.{i}.values"), &l.values);
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn save_glu_memory(mem: &LocasGluMemory, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.fields(&[("kind", 1), ("layers", mem.layers.len() as u64)]);
    w.tensor_count(5 * mem.layers.len());
    for (i, l) in mem.layers.iter().enumerate() {
        w.matrix(&format!("locas.{i}.gate"), &l.gate);
        w.matrix(&format!("locas.{i}.keys"), &l.keys);
        w.matrix(&format!("locas.{i}.values"), &l.values);
        w.tensor(&format!("locas.{i}.tau"), 1, 1, &[l.tau]);
        let sel: Vec<f64> = l.selection.iter().map(|&s| s as f64).collect();
        w.tensor(&format!("locas.{i}.selection"), 1, sel.len(), &sel);
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_memory(path: &Path) -> Result<MemoryCheckpoint> {
    let mut r = Reader::open(path)?;
    let fields = r.fields()?;
    let kind = field(&fields, "kind")?;
    let layers = field(&fields, "layers")? as usize;
    let declared = r.u32()? as usize;
    match kind {
        0 => {
            if declared != 1 + 2 * layers {
                return Err(LocasError::Format("memory tensor count mismatch".into()));
            }
            let eps = r.expect_tensor("locas.epsilon", 1, 1)?.data()[0];
            let mut out = Vec::with_capacity(layers);
            for i in 0..layers {
                let (kname, keys) = r.tensor()?;
                if kname != format!("locas.{i}.keys") {
                    return Err(LocasError::Format(format!("unexpected tensor '{kname}'")));
                }
                let values =
                    r.expect_tensor(&format!("locas.{i}.values"), keys.cols(), keys.rows())?;
                out.push(MlpMemoryLayer { keys, values });
            }
            Ok(MemoryCheckpoint::Mlp(LocasMlpMemory { layers: out, epsilon: eps }))
        }
        1 => {
            if declared != 5 * layers {
                return Err(LocasError::Format("memory tensor count mismatch".into()));
            }
            let mut out = Vec::with_capacity(layers);
            for i in 0..layers {
                let (gname, gate) = r.tensor()?;
                if gname != format!("locas.{i}.gate") {
                    return Err(LocasError::Format(format!("unexpected tensor '{gname}'")));
                }
                let keys = r.expect_tensor(&format!("locas.{i}.keys"), gate.rows(), gate.cols())?;
                let values =
                    r.expect_tensor(&format!("locas.{i}.values"), keys.cols(), keys.rows())?;
                let tau = r.expect_tensor(&format!("locas.{i}.tau"), 1, 1)?.data()[0];
                let (sname, sel) = r.tensor()?;
                if sname != format!("locas.{i}.selection") {
                    return Err(LocasError::Format(format!("unexpected tensor '{sname}'")));
                }
                let selection = sel.data().iter().map(|&v| v as usize).collect();
                out.push(GluMemoryLayer { gate, keys, values, tau, selection });
            }
            Ok(MemoryCheckpoint::Glu(LocasGluMemory { layers: out }))
        }
        other => Err(LocasError::Format(format!("unknown memory kind {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    #[test]
    fn backbone_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [ModelConfig::desk_mlp(), ModelConfig::desk_glu()] {
            let mut small = cfg;
            small.d_model = 16;
            small.d_ff = 24;
            small.heads = 2;
            small.vocab = 40;
            let bb = Backbone::init(small, 3).unwrap();
            let path = dir.path().join("bb.ckpt");
            save_backbone(&bb, &path).unwrap();
            let loaded = load_backbone(&path).unwrap();
            assert_eq!(bb.cfg, loaded.cfg);
            assert_eq!(bb.weights, loaded.weights);
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut small = ModelConfig::desk_mlp();
        small.d_model = 16;
        small.d_ff = 8;
        small.heads = 2;
        small.vocab = 20;
        let bb = Backbone::init(small, 1).unwrap();
        let path = dir.path().join("bb.ckpt");
        save_backbone(&bb, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert_eq!(err.category(), "FormatError");
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"LOCA");
        buf.extend_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        let err = load_backbone(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains('7') && msg.contains('1'), "got: {msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert_eq!(load_backbone(&path).unwrap_err().category(), "FormatError");
    }

    #[test]
    fn memory_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut mlp = LocasMlpMemory::empty(2, 8, 1e-2);
        mlp.append_slot(
            &[vec![1.0; 8], vec![2.0; 8]],
            &[vec![0.5; 8], vec![-0.5; 8]],
        )
        .unwrap();
        let path = dir.path().join("mem.ckpt");
        save_mlp_memory(&mlp, &path).unwrap();
        match load_memory(&path).unwrap() {
            MemoryCheckpoint::Mlp(loaded) => assert_eq!(loaded, mlp),
            _ => panic!("wrong kind"),
        }

        let glu = LocasGluMemory {
            layers: vec![crate::memory::GluMemoryLayer {
                gate: Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap(),
                keys: Matrix::from_rows(&[vec![0.5, 0.6], vec![0.7, 0.8]]).unwrap(),
                values: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
                tau: 0.25,
                selection: vec![3, 7],
            }],
        };
        let path = dir.path().join("gmem.ckpt");
        save_glu_memory(&glu, &path).unwrap();
        match load_memory(&path).unwrap() {
            MemoryCheckpoint::Glu(loaded) => assert_eq!(loaded, glu),
            _ => panic!("wrong kind"),
        }
    }
}
