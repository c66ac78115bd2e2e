//! Binary checkpoint of a [`SceneField`].
//!
//! Layout (little-endian): magic `SMF1`, `u32` version, `u32` encoding tag,
//! `u32` m (or positional levels), `f32` sigma_enc, `f32` omega0, `u32`
//! classes, `u32` hidden layer count, one `u32` per hidden width, then an
//! `f32` blob: frequencies (m x 3 row-major), amplitudes, geometry layers
//! (weight row-major then bias), semantic layers.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoding::{Encoding, EncodingKind, FourierEncoding};
use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::siren::{Linear, SineMlp};

pub const MAGIC: &[u8; 4] = b"SMF1";
pub const VERSION: u32 = 1;

/// Architecture stored in the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub encoding: EncodingKind,
    /// Fourier `m`, positional levels, or 0.
    pub encoding_size: usize,
    pub sigma_enc: f32,
    pub omega0: f32,
    pub classes: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn of(field: &SceneField) -> Self {
        let encoding_size = match field.encoding() {
            Encoding::Fourier(f) => f.features(),
            Encoding::Positional { levels } => *levels,
            Encoding::None => 0,
        };
        let widths = field.geometry_head().widths();
        Self {
            encoding: field.encoding().kind(),
            encoding_size,
            sigma_enc: field.sigma_enc as f32,
            omega0: field.geometry_head().omega0 as f32,
            classes: field.classes(),
            hidden: widths[1..widths.len() - 1].to_vec(),
        }
    }

    fn input_dim(&self) -> usize {
        match self.encoding {
            EncodingKind::Fourier => 2 * self.encoding_size,
            EncodingKind::Positional => 3 + 6 * self.encoding_size,
            EncodingKind::None => 3,
        }
    }

    fn widths(&self, out: usize) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(out);
        w
    }

    fn mlp_params(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn header_bytes(&self) -> usize {
        4 + 4 * 7 + 4 * self.hidden.len()
    }

    pub fn blob_floats(&self) -> usize {
        let enc = if self.encoding == EncodingKind::Fourier {
            4 * self.encoding_size
        } else {
            0
        };
        enc + Self::mlp_params(&self.widths(1)) + Self::mlp_params(&self.widths(self.classes))
    }

    /// Exact file size for this architecture.
    pub fn file_size(&self) -> usize {
        self.header_bytes() + 4 * self.blob_floats()
    }
}

pub fn to_bytes(field: &SceneField) -> Vec<u8> {
    let arch = Architecture::of(field);
    let mut out = Vec::with_capacity(arch.file_size());
    out.extend_from_slice(MAGIC);
    let put_u32 = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    put_u32(&mut out, VERSION);
    put_u32(&mut out, arch.encoding.tag());
    put_u32(&mut out, arch.encoding_size as u32);
    out.extend_from_slice(&arch.sigma_enc.to_le_bytes());
    out.extend_from_slice(&arch.omega0.to_le_bytes());
    put_u32(&mut out, arch.classes as u32);
    put_u32(&mut out, arch.hidden.len() as u32);
    for &h in &arch.hidden {
        put_u32(&mut out, h as u32);
    }
    let mut put_f32 = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    if let Encoding::Fourier(f) = field.encoding() {
        f.frequencies.iter().for_each(|&v| put_f32(v));
        f.amplitudes.iter().for_each(|&v| put_f32(v));
    }
    for head in [field.geometry_head(), field.semantic_head()] {
        for slice in head.param_slices() {
            slice.iter().for_each(|&v| put_f32(v));
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        self.pos = end;
        Ok(chunk.try_into().expect("4 bytes"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take4().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take4().map(f32::from_le_bytes)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32().map(f64::from)).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<SceneField> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a field checkpoint (bad magic)"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u32()?;
    let encoding = EncodingKind::from_tag(tag)
        .ok_or_else(|| Error::format(format!("unknown encoding tag {tag}")))?;
    let encoding_size = r.u32()? as usize;
    let sigma_enc = r.f32()?;
    let omega0 = r.f32()?;
    let classes = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden == 0 || n_hidden > 64 || classes == 0 {
        return Err(Error::format("implausible architecture header"));
    }
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        encoding,
        encoding_size,
        sigma_enc,
        omega0,
        classes,
        hidden,
    };
    if bytes.len() != arch.file_size() {
        return Err(Error::format(format!(
            "checkpoint is {} bytes, architecture needs {}",
            bytes.len(),
            arch.file_size()
        )));
    }
    let enc = match encoding {
        EncodingKind::Fourier => {
            let m = encoding_size;
            let freq = r.floats(3 * m)?;
            let amps = r.floats(m)?;
            Encoding::Fourier(FourierEncoding::from_parts(
                Array2::from_shape_vec((m, 3), freq).expect("m x 3"),
                amps,
            ))
        }
        EncodingKind::Positional => Encoding::Positional {
            levels: encoding_size,
        },
        EncodingKind::None => Encoding::None,
    };
    let mut read_mlp = |widths: Vec<usize>| -> Result<SineMlp> {
        let layers = widths
            .windows(2)
            .map(|w| {
                let weight = Array2::from_shape_vec((w[1], w[0]), r.floats(w[0] * w[1])?)
                    .expect("layer shape");
                let bias = Array1::from(r.floats(w[1])?);
                Ok(Linear { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SineMlp {
            layers,
            omega0: f64::from(omega0),
        })
    };
    let geometry = read_mlp(arch.widths(1))?;
    let semantic = read_mlp(arch.widths(classes))?;
    Ok(SceneField {
        encoding: enc,
        sigma_enc: f64::from(sigma_enc),
        geometry,
        semantic,
    })
}

pub fn save(field: &SceneField, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(field))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SceneField> {
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::geometry::Point3;

    fn configs() -> Vec<FieldConfig> {
        vec![
            FieldConfig {
                fourier_features: 8,
                sigma_enc: 2.0,
                hidden: vec![12, 10],
                ..Default::default()
            },
            FieldConfig {
                encoding: EncodingKind::Positional,
                positional_levels: 3,
                hidden: vec![9],
                ..Default::default()
            },
            FieldConfig {
                encoding: EncodingKind::None,
                hidden: vec![7, 7, 7],
                omega0: 20.0,
                ..Default::default()
            },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (i, cfg) in configs().into_iter().enumerate() {
            let field = SceneField::new(&cfg, 4, i as u64).unwrap();
            let path = dir.path().join(format!("f{i}.ckpt"));
            save(&field, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back, field);
            let p = Point3::new(0.1, 0.2, -0.3);
            assert_eq!(back.eval_sdf(&p).to_bits(), field.eval_sdf(&p).to_bits());
            assert_eq!(back.eval_semantic(&p), field.eval_semantic(&p));
        }
    }

    #[test]
    fn size_depends_only_on_architecture() {
        for cfg in configs() {
            let a = to_bytes(&SceneField::new(&cfg, 3, 1).unwrap());
            let b = to_bytes(&SceneField::new(&cfg, 3, 2).unwrap());
            assert_eq!(a.len(), b.len());
            let arch = Architecture::of(&SceneField::new(&cfg, 3, 1).unwrap());
            assert_eq!(a.len(), arch.file_size());
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let field = SceneField::new(&configs()[0], 2, 0).unwrap();
        let bytes = to_bytes(&field);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 99;
        let err = from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Format(_))));
    }
}
