//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"MFG1"
//! version u32
//! config  10 x u32  (d_model, n_layers, n_heads, vocab_size, n_img_tokens,
//!                    max_text_tokens, d_feat, d_enc, n_options, seed)
//! record* name_len u32, name bytes, rows u32, cols u32, rows*cols f64
//! ```
//!
//! Records run until EOF. Every parameter must appear exactly once, and the
//! stored frozen encoder must match what the config seed regenerates, so a
//! checkpoint cannot silently graft trained weights onto a different frozen
//! backbone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"MFG1";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn config_fields(c: &ModelConfig) -> [u32; 10] {
    [
        c.d_model as u32,
        c.n_layers as u32,
        c.n_heads as u32,
        c.vocab_size as u32,
        c.n_img_tokens as u32,
        c.max_text_tokens as u32,
        c.d_feat as u32,
        c.d_enc as u32,
        c.n_options as u32,
        c.seed,
    ]
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    for v in config_fields(&model.config) {
        put_u32(&mut w, v)?;
    }
    for (name, tensor) in model.parameters() {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, tensor.rows() as u32)?;
        put_u32(&mut w, tensor.cols() as u32)?;
        for v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: file too short for a header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}, this build reads {VERSION}",
            path.display()
        )));
    }

    let mut f = [0u32; 10];
    for v in f.iter_mut() {
        *v = get_u32(&mut r)?;
    }
    let config = ModelConfig {
        d_model: f[0] as usize,
        n_layers: f[1] as usize,
        n_heads: f[2] as usize,
        vocab_size: f[3] as usize,
        n_img_tokens: f[4] as usize,
        max_text_tokens: f[5] as usize,
        d_feat: f[6] as usize,
        d_enc: f[7] as usize,
        n_options: f[8] as usize,
        seed: f[9],
    };
    let model = Model::new(config)?;

    let expected: Vec<(String, Vec<f64>, usize, usize)> = model
        .parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.to_vec(), t.rows(), t.cols()))
        .collect();
    let mut seen = std::collections::HashSet::new();

    loop {
        let name_len = match get_u32(&mut r) {
            Ok(v) => v as usize,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 parameter name", path.display())))?;
        let rows = get_u32(&mut r)? as usize;
        let cols = get_u32(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }

        let (_, init, exp_rows, exp_cols) = expected
            .iter()
            .find(|(n, _, _, _)| *n == name)
            .ok_or_else(|| {
                Error::Checkpoint(format!("{}: unknown parameter {name:?}", path.display()))
            })?;
        if (rows, cols) != (*exp_rows, *exp_cols) {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {name:?} is {rows}x{cols}, model wants {exp_rows}x{exp_cols}",
                path.display()
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {name:?} appears twice",
                path.display()
            )));
        }
        if name == "frozen_encoder" {
            let same = init.len() == data.len()
                && init.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Checkpoint(format!(
                    "{}: stored frozen encoder does not match seed {}",
                    path.display(),
                    model.config.seed
                )));
            }
        } else {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter {name:?} holds non-finite values",
                    path.display()
                )));
            }
            model.set_parameter_data(&name, &data)?;
        }
    }

    if seen.len() != expected.len() {
        let missing: Vec<&str> = expected
            .iter()
            .map(|(n, _, _, _)| n.as_str())
            .filter(|n| !seen.contains(*n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "{}: missing parameters {missing:?}",
            path.display()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{gauss, stream};
    use crate::synth::{generate_dataset, GeneratorConfig, Split, TaskKind};

    fn jittered_model() -> Model {
        let model = Model::new(ModelConfig::default()).unwrap();
        let mut rng = stream(42, "ckpt-jitter");
        for (name, t) in model.trainable_parameters() {
            let vals: Vec<f64> = t.to_vec().iter().map(|v| v + 0.01 * gauss(&mut rng)).collect();
            model.set_parameter_data(&name, &vals).unwrap();
        }
        model
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = jittered_model();
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();

        assert_eq!(model.config, back.config);
        for ((na, ta), (nb, tb)) in model.parameters().iter().zip(back.parameters().iter()) {
            assert_eq!(na, nb);
            let a = ta.to_vec();
            let b = tb.to_vec();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
        }

        let s = &generate_dataset(&GeneratorConfig::new(1), TaskKind::Vqa, Split::Test, 1).unwrap()[0];
        assert_eq!(model.predict(s).unwrap(), back.predict(s).unwrap());

        // Saving the loaded model reproduces the same bytes.
        let path2 = dir.path().join("model2.bin");
        save(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = jittered_model();
        save(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save(&jittered_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
        std::fs::write(&path, &bytes[..2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn frozen_encoder_tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save(&jittered_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First record is the frozen encoder; flip a payload byte past its
        // header (4+4+40 config/header bytes, then 4+14+8 record header).
        let payload = 48 + 4 + "frozen_encoder".len() + 8;
        bytes[payload + 3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("frozen")));
    }

    #[test]
    fn version_gate_holds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save(&jittered_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("version")));
    }
}
