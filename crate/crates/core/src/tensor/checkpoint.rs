//! Checkpoint files: parameters plus the config text that built them.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic   8 bytes  "TIGERCK1"
//! clen    u32      config text length in bytes
//! config  clen     UTF-8 config text
//! count   u32      number of parameters
//! per parameter, sorted by name:
//!   nlen u32, name (UTF-8), ndim u32, dims u32 x ndim, values f32 x prod(dims)
//! ```
//!
//! Values are stored as f32 regardless of the in-memory scalar type, so a
//! checkpoint written from an f64 model loads into an f32 model and back.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::store::ParameterStore;

pub const MAGIC: &[u8; 8] = b"TIGERCK1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("field exceeds u32 range".to_string()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save<S: Scalar>(path: &Path, config_text: &str, store: &ParameterStore<S>) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    put_u32(&mut w, config_text.len())?;
    w.write_all(config_text.as_bytes())?;
    put_u32(&mut w, store.len())?;
    for (name, p) in store.iter() {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut w, d)?;
        }
        for &v in &p.data {
            w.write_all(&(v.to_f64c() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the embedded config text and a store seeded arbitrarily (loading
/// replaces every value, so the seed never matters).
pub fn load<S: Scalar>(path: &Path) -> Result<(String, ParameterStore<S>)> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".to_string()));
    }
    let clen = get_u32(&mut r)? as usize;
    let mut cbuf = vec![0u8; clen];
    r.read_exact(&mut cbuf)?;
    let config_text = String::from_utf8(cbuf)
        .map_err(|_| Error::Format("checkpoint config text is not UTF-8".to_string()))?;
    let count = get_u32(&mut r)? as usize;

    let mut store = ParameterStore::new(0);
    for _ in 0..count {
        let nlen = get_u32(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| Error::Format("parameter name is not UTF-8".to_string()))?;
        let ndim = get_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("parameter '{name}' claims {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(S::from_f64c(f32::from_le_bytes(b) as f64));
        }
        store.insert(&name, shape, data)?;
    }
    // Trailing garbage means the file is not what it claims to be.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok((config_text, store)),
        _ => Err(Error::Format("trailing bytes after last parameter".to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new(11);
        s.init_conv("split.band0.conv", 4, 2, 1, true).unwrap();
        s.init_norm("split.band0.norm", 2).unwrap();
        s.init_prelu("restore.band0.prelu").unwrap();
        s
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let cfg = "[model]\npreset: small\n";
        save(&path, cfg, &store).unwrap();
        let (cfg2, loaded): (String, ParameterStore<f32>) = load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(loaded.len(), store.len());
        for (name, p) in store.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(q.shape, p.shape);
            assert_eq!(q.data, p.data, "{name}");
        }
    }

    #[test]
    fn repeated_saves_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let store = sample_store();
        save(&a, "cfg", &store).unwrap();
        save(&b, "cfg", &store).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn f64_store_roundtrips_through_f32_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut s: ParameterStore<f64> = ParameterStore::new(5);
        s.init_conv("c", 2, 2, 3, false).unwrap();
        save(&path, "", &s).unwrap();
        let (_, loaded): (String, ParameterStore<f64>) = load(&path).unwrap();
        for (v, w) in
            s.get("c.weight").unwrap().data.iter().zip(&loaded.get("c.weight").unwrap().data)
        {
            assert!((v - w).abs() < 1e-7, "f32 quantization only");
            assert_eq!(*w as f32, *w as f32, "loaded value is f32-representable");
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = sample_store();
        save(&path, "config", &store).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad, &corrupted).unwrap();
        assert!(matches!(load::<f32>(&bad), Err(Error::Format(_))));

        let short = dir.path().join("short.ckpt");
        std::fs::write(&short, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load::<f32>(&short).is_err());

        let long = dir.path().join("long.ckpt");
        let mut extended = bytes;
        extended.push(0);
        std::fs::write(&long, &extended).unwrap();
        assert!(matches!(load::<f32>(&long), Err(Error::Format(_))));
    }
}
