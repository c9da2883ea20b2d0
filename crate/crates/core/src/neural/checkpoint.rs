//! Versioned little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "PECTSNET"
//! version  u32      1
//! artifact u32      1 = PNN ensemble, 2 = barrier, 3 = classifier
//! env      u32      0 = unicycle, 1 = ackermann, 2 = double integrator
//! payload  artifact-specific, see below
//! ```
//!
//! A network is stored as `n_sizes: u32`, the sizes as `u32`, the hidden and
//! output activation tags as `u32`, then every weight matrix (row-major,
//! `in x out`) followed by its bias, all as `f64`.
//!
//! Ensemble payload: `goal_features: u32`, `members: u32`, input normalizer,
//! target normalizer (each `dim: u32`, means, stds), then per member
//! `logvar_min: f64`, `logvar_max: f64` and the network.
//! Barrier payload: `lipschitz: f64`, the network, then per layer the power
//! vector (`len: u32` + values) and the certified norm.
//! Classifier payload: the network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::lipschitz::LipschitzCbf;
use super::pnn::{Normalizer, Pnn, PnnEnsemble};
use super::{Activation, Dense, DenseNet, SafetyClassifier};
use crate::envs::EnvKind;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PECTSNET";
pub const VERSION: u32 = 1;

const ARTIFACT_ENSEMBLE: u32 = 1;
const ARTIFACT_BARRIER: u32 = 2;
const ARTIFACT_CLASSIFIER: u32 = 3;

fn kind_tag(kind: EnvKind) -> u32 {
    match kind {
        EnvKind::Unicycle => 0,
        EnvKind::Ackermann => 1,
        EnvKind::DoubleIntegrator => 2,
    }
}

fn kind_from_tag(tag: u32) -> Result<EnvKind> {
    match tag {
        0 => Ok(EnvKind::Unicycle),
        1 => Ok(EnvKind::Ackermann),
        2 => Ok(EnvKind::DoubleIntegrator),
        t => Err(Error::Checkpoint(format!("unknown env tag {t}"))),
    }
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }

    fn header(&mut self, artifact: u32, kind: EnvKind) -> Result<()> {
        self.0.write_all(MAGIC)?;
        self.u32(VERSION)?;
        self.u32(artifact)?;
        self.u32(kind_tag(kind))
    }

    fn net(&mut self, net: &DenseNet) -> Result<()> {
        let sizes = net.sizes();
        self.u32(sizes.len() as u32)?;
        for s in sizes {
            self.u32(s as u32)?;
        }
        self.u32(net.hidden.tag())?;
        self.u32(net.output.tag())?;
        for l in &net.layers {
            self.f64s(l.weight.iter())?;
            self.f64s(l.bias.iter())?;
        }
        Ok(())
    }

    fn normalizer(&mut self, n: &Normalizer) -> Result<()> {
        self.u32(n.dim() as u32)?;
        self.f64s(&n.mean)?;
        self.f64s(&n.std)
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b).map_err(truncated)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b).map_err(truncated)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }

    fn header(&mut self, artifact: u32) -> Result<EnvKind> {
        let mut magic = [0u8; 8];
        self.0.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let got = self.u32()?;
        if got != artifact {
            return Err(Error::Checkpoint(format!("expected artifact {artifact}, found {got}")));
        }
        kind_from_tag(self.u32()?)
    }

    fn net(&mut self) -> Result<DenseNet> {
        let n = self.len()?;
        if n < 2 {
            return Err(Error::Checkpoint("network needs at least two sizes".into()));
        }
        let sizes = (0..n).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let hidden = Activation::from_tag(self.u32()?)?;
        let output = Activation::from_tag(self.u32()?)?;
        let mut layers = Vec::with_capacity(n - 1);
        for w in sizes.windows(2) {
            let weight = Array2::from_shape_vec((w[0], w[1]), self.f64s(w[0] * w[1])?).expect("shape");
            let bias = Array1::from(self.f64s(w[1])?);
            layers.push(Dense { weight, bias });
        }
        Ok(DenseNet { layers, hidden, output })
    }

    fn normalizer(&mut self) -> Result<Normalizer> {
        let d = self.len()?;
        Ok(Normalizer {
            mean: self.f64s(d)?,
            std: self.f64s(d)?,
        })
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_ensemble<W: Write>(w: W, ens: &PnnEnsemble) -> Result<()> {
    let mut o = Out(w);
    o.header(ARTIFACT_ENSEMBLE, ens.kind)?;
    o.u32(ens.goal_features as u32)?;
    o.u32(ens.members.len() as u32)?;
    o.normalizer(&ens.input_norm)?;
    o.normalizer(&ens.target_norm)?;
    for m in &ens.members {
        o.f64(m.logvar_min)?;
        o.f64(m.logvar_max)?;
        o.net(&m.net)?;
    }
    Ok(o.0.flush()?)
}

pub fn read_ensemble<R: Read>(r: R) -> Result<PnnEnsemble> {
    let mut i = In(r);
    let kind = i.header(ARTIFACT_ENSEMBLE)?;
    let goal_features = i.u32()? != 0;
    let n = i.len()?;
    let input_norm = i.normalizer()?;
    let target_norm = i.normalizer()?;
    let members = (0..n)
        .map(|_| {
            let logvar_min = i.f64()?;
            let logvar_max = i.f64()?;
            Ok(Pnn {
                net: i.net()?,
                logvar_min,
                logvar_max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PnnEnsemble {
        kind,
        goal_features,
        members,
        input_norm,
        target_norm,
    })
}

pub fn write_barrier<W: Write>(w: W, cbf: &LipschitzCbf) -> Result<()> {
    let mut o = Out(w);
    o.header(ARTIFACT_BARRIER, cbf.kind)?;
    o.f64(cbf.lipschitz)?;
    o.net(&cbf.net)?;
    for (v, c) in cbf.power_vectors.iter().zip(&cbf.certified) {
        o.u32(v.len() as u32)?;
        o.f64s(v.iter())?;
        o.f64(*c)?;
    }
    Ok(o.0.flush()?)
}

pub fn read_barrier<R: Read>(r: R) -> Result<LipschitzCbf> {
    let mut i = In(r);
    let kind = i.header(ARTIFACT_BARRIER)?;
    let lipschitz = i.f64()?;
    let net = i.net()?;
    let mut power_vectors = Vec::new();
    let mut certified = Vec::new();
    for _ in 0..net.layers.len() {
        let n = i.len()?;
        power_vectors.push(Array1::from(i.f64s(n)?));
        certified.push(i.f64()?);
    }
    Ok(LipschitzCbf {
        kind,
        net,
        lipschitz,
        power_vectors,
        certified,
    })
}

pub fn write_classifier<W: Write>(w: W, c: &SafetyClassifier) -> Result<()> {
    let mut o = Out(w);
    o.header(ARTIFACT_CLASSIFIER, c.kind)?;
    o.net(&c.net)?;
    Ok(o.0.flush()?)
}

pub fn read_classifier<R: Read>(r: R) -> Result<SafetyClassifier> {
    let mut i = In(r);
    let kind = i.header(ARTIFACT_CLASSIFIER)?;
    Ok(SafetyClassifier { kind, net: i.net()? })
}

pub fn save_ensemble(path: &Path, ens: &PnnEnsemble) -> Result<()> {
    write_ensemble(BufWriter::new(File::create(path)?), ens)
}

pub fn load_ensemble(path: &Path) -> Result<PnnEnsemble> {
    read_ensemble(BufReader::new(File::open(path)?))
}

pub fn save_barrier(path: &Path, cbf: &LipschitzCbf) -> Result<()> {
    write_barrier(BufWriter::new(File::create(path)?), cbf)
}

pub fn load_barrier(path: &Path) -> Result<LipschitzCbf> {
    read_barrier(BufReader::new(File::open(path)?))
}

pub fn save_classifier(path: &Path, c: &SafetyClassifier) -> Result<()> {
    write_classifier(BufWriter::new(File::create(path)?), c)
}

pub fn load_classifier(path: &Path) -> Result<SafetyClassifier> {
    read_classifier(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TaskContext;
    use crate::model::{Barrier, DynamicsModel};
    use crate::neural::classifier::ClassifierArch;
    use crate::neural::lipschitz::CbfArch;
    use crate::neural::pnn::PnnArch;
    use crate::rng::RandomStream;

    #[test]
    fn ensemble_round_trip_is_bit_exact() {
        let mut rng = RandomStream::new(7, 0);
        let arch = PnnArch {
            hidden: vec![8, 8],
            ..PnnArch::default()
        };
        let mut ens = PnnEnsemble::new(EnvKind::Unicycle, true, 3, &arch, &mut rng);
        ens.input_norm.mean[0] = 0.3;
        ens.target_norm.std[1] = 2.5;
        let mut bytes = Vec::new();
        write_ensemble(&mut bytes, &ens).unwrap();
        let back = read_ensemble(bytes.as_slice()).unwrap();
        assert_eq!(back, ens);
        let s = Array2::from_shape_fn((4, 3), |_| rng.normal());
        let a = Array2::from_shape_fn((4, 2), |_| rng.uniform_range(-1.0, 1.0));
        let ctx = TaskContext::default();
        assert_eq!(ens.predict(1, s.view(), a.view(), &ctx), back.predict(1, s.view(), a.view(), &ctx));
    }

    #[test]
    fn barrier_and_classifier_round_trip() {
        let mut rng = RandomStream::new(8, 0);
        let cbf = LipschitzCbf::new(EnvKind::Ackermann, &CbfArch { hidden: vec![6], ..CbfArch::default() }, &mut rng);
        let mut bytes = Vec::new();
        write_barrier(&mut bytes, &cbf).unwrap();
        let back = read_barrier(bytes.as_slice()).unwrap();
        assert_eq!(back, cbf);
        let s = Array2::from_shape_fn((5, 4), |_| rng.normal());
        assert_eq!(back.values(s.view()), cbf.values(s.view()));

        let c = SafetyClassifier::new(EnvKind::Unicycle, &ClassifierArch { hidden: vec![4] }, &mut rng);
        let mut bytes = Vec::new();
        write_classifier(&mut bytes, &c).unwrap();
        assert_eq!(read_classifier(bytes.as_slice()).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(read_classifier(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
        let mut rng = RandomStream::new(9, 0);
        let c = SafetyClassifier::new(EnvKind::Unicycle, &ClassifierArch { hidden: vec![4] }, &mut rng);
        let mut bytes = Vec::new();
        write_classifier(&mut bytes, &c).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_classifier(bytes.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_barrier(&bytes[..]).is_err());
    }
}
