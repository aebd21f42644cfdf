//! Model files: a fixed preamble, a JSON header describing the layout, then
//! one posterior record per parameter block.
//!
//! ```text
//! b"VCLM"  magic
//! u8       format version
//! u8       kind (1 classifier, 2 generative, 3 point network)
//! u32      header length, then the JSON header
//! u32      record count, then the records
//! ```
//!
//! Point-estimated tensors are stored as posterior records with
//! `log σ = −∞`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, DiscriminativeModel, Encoder, GenerativeModel, GenerativeSpec, Head, PointNet};
use crate::bayes::codec::{read_u32, read_u8};
use crate::bayes::{read_posterior, write_posterior, GaussianLinear, MeanFieldGaussian, PriorSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u8 = 1;

const MAGIC: &[u8; 4] = b"VCLM";
const KIND_DISCRIMINATIVE: u8 = 1;
const KIND_GENERATIVE: u8 = 2;
const KIND_POINT: u8 = 3;

#[derive(Serialize, Deserialize)]
struct DiscHeader {
    arch: ArchitectureSpec,
    prior: PriorSpec,
    head_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GenHeader {
    spec: GenerativeSpec,
    prior: PriorSpec,
    head_ids: Vec<usize>,
    encoder_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PointHeader {
    arch: ArchitectureSpec,
    head_ids: Vec<usize>,
}

fn write_file<W: Write, H: Serialize>(w: &mut W, kind: u8, header: &H, records: &[MeanFieldGaussian]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&[CHECKPOINT_FORMAT_VERSION, kind])?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        write_posterior(w, r)?;
    }
    Ok(())
}

fn read_file<R: Read, H: for<'de> Deserialize<'de>>(r: &mut R, kind: u8) -> Result<(H, Vec<MeanFieldGaussian>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = read_u8(r)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let found = read_u8(r)?;
    if found != kind {
        return Err(Error::Format(format!("checkpoint kind {found}, expected {kind}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = Vec::new();
    r.take(len as u64).read_to_end(&mut json)?;
    if json.len() != len {
        return Err(Error::Truncated {
            what: "checkpoint header".into(),
            expected: len,
            actual: json.len(),
        });
    }
    let header = serde_json::from_slice(&json)?;
    let count = read_u32(r)? as usize;
    let records = (0..count).map(|_| read_posterior(r)).collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

fn layer_records<'a>(layers: impl Iterator<Item = &'a GaussianLinear>) -> Vec<MeanFieldGaussian> {
    layers.flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
}

fn point_record(t: &Tensor) -> MeanFieldGaussian {
    MeanFieldGaussian::new(t.clone(), Tensor::full(t.shape(), f64::NEG_INFINITY)).expect("same shape")
}

struct Records(std::vec::IntoIter<MeanFieldGaussian>);

impl Records {
    fn next(&mut self) -> Result<MeanFieldGaussian> {
        self.0.next().ok_or_else(|| Error::Format("checkpoint has too few records".into()))
    }

    fn block(&mut self, shape: &[usize]) -> Result<MeanFieldGaussian> {
        let b = self.next()?;
        if b.shape() != shape {
            return Err(Error::Format(format!("record shape {:?}, expected {shape:?}", b.shape())));
        }
        Ok(b)
    }

    fn layer(&mut self, input: usize, output: usize) -> Result<GaussianLinear> {
        Ok(GaussianLinear {
            weight: self.block(&[input, output])?,
            bias: self.block(&[output])?,
        })
    }

    fn point(&mut self, input: usize, output: usize) -> Result<(Tensor, Tensor)> {
        let l = self.layer(input, output)?;
        Ok((l.weight.mu().clone(), l.bias.mu().clone()))
    }

    fn finish(mut self) -> Result<()> {
        match self.0.next() {
            None => Ok(()),
            Some(_) => Err(Error::Format("checkpoint has extra records".into())),
        }
    }
}

pub fn write_discriminative<W: Write>(w: &mut W, model: &DiscriminativeModel) -> Result<()> {
    let header = DiscHeader {
        arch: model.arch().clone(),
        prior: *model.prior(),
        head_ids: model.head_ids(),
    };
    let records = layer_records(model.trunk().iter().chain(model.heads().iter().map(|h| &h.value)));
    write_file(w, KIND_DISCRIMINATIVE, &header, &records)
}

pub fn read_discriminative<R: Read>(r: &mut R) -> Result<DiscriminativeModel> {
    let (h, records): (DiscHeader, _) = read_file(r, KIND_DISCRIMINATIVE)?;
    h.arch.validate()?;
    let mut rec = Records(records.into_iter());
    let trunk = h
        .arch
        .trunk_dims()
        .into_iter()
        .map(|(i, o)| rec.layer(i, o))
        .collect::<Result<Vec<_>>>()?;
    let (hi, ho) = h.arch.head_dims();
    let heads = h
        .head_ids
        .iter()
        .map(|&task_id| Ok(Head { task_id, value: rec.layer(hi, ho)? }))
        .collect::<Result<Vec<_>>>()?;
    rec.finish()?;
    Ok(DiscriminativeModel::from_parts(h.arch, h.prior, trunk, heads))
}

pub fn write_generative<W: Write>(w: &mut W, model: &GenerativeModel) -> Result<()> {
    let (shared, heads, encoders) = model.parts();
    let header = GenHeader {
        spec: model.spec().clone(),
        prior: *model.prior(),
        head_ids: heads.iter().map(|h| h.task_id).collect(),
        encoder_ids: encoders.iter().map(|e| e.task_id).collect(),
    };
    let mut records = layer_records(shared.iter().chain(heads.iter().flat_map(|h| h.value.iter())));
    for e in encoders {
        records.extend(e.value.params().iter().map(point_record));
    }
    write_file(w, KIND_GENERATIVE, &header, &records)
}

pub fn read_generative<R: Read>(r: &mut R) -> Result<GenerativeModel> {
    let (h, records): (GenHeader, _) = read_file(r, KIND_GENERATIVE)?;
    h.spec.validate()?;
    let mut rec = Records(records.into_iter());
    let shared = h
        .spec
        .shared_dims()
        .into_iter()
        .map(|(i, o)| rec.layer(i, o))
        .collect::<Result<Vec<_>>>()?;
    let mut heads = Vec::with_capacity(h.head_ids.len());
    for &task_id in &h.head_ids {
        let value = h
            .spec
            .head_dims()
            .into_iter()
            .map(|(i, o)| rec.layer(i, o))
            .collect::<Result<Vec<_>>>()?;
        heads.push(Head { task_id, value });
    }
    let mut encoders = Vec::with_capacity(h.encoder_ids.len());
    for &task_id in &h.encoder_ids {
        let layers = h
            .spec
            .encoder_dims()
            .into_iter()
            .map(|(i, o)| rec.point(i, o))
            .collect::<Result<Vec<_>>>()?;
        encoders.push(Head {
            task_id,
            value: Encoder { layers },
        });
    }
    rec.finish()?;
    Ok(GenerativeModel::from_parts(h.spec, h.prior, shared, heads, encoders))
}

pub fn write_point_net<W: Write>(w: &mut W, net: &PointNet) -> Result<()> {
    let header = PointHeader {
        arch: net.arch().clone(),
        head_ids: net.head_ids(),
    };
    let records: Vec<_> = net.params().iter().map(point_record).collect();
    write_file(w, KIND_POINT, &header, &records)
}

pub fn read_point_net<R: Read>(r: &mut R) -> Result<PointNet> {
    let (h, records): (PointHeader, _) = read_file(r, KIND_POINT)?;
    h.arch.validate()?;
    let mut rec = Records(records.into_iter());
    let trunk = h
        .arch
        .trunk_dims()
        .into_iter()
        .map(|(i, o)| rec.point(i, o))
        .collect::<Result<Vec<_>>>()?;
    let (hi, ho) = h.arch.head_dims();
    let heads = h
        .head_ids
        .iter()
        .map(|&task_id| Ok(Head { task_id, value: rec.point(hi, ho)? }))
        .collect::<Result<Vec<_>>>()?;
    rec.finish()?;
    Ok(PointNet::from_parts(h.arch, trunk, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_discriminative;
    use crate::rng::stream;

    #[test]
    fn discriminative_round_trip_is_byte_identical() {
        let spec = ArchitectureSpec::multi_head(3, vec![4], 2, 2);
        let mut m = build_discriminative(&spec, PriorSpec::standard()).unwrap();
        let mut r = stream(1, &[]);
        *m.head_mut(1).unwrap().weight.mu_mut() = Tensor::randn(&[4, 2], &mut r);
        let mut a = Vec::new();
        write_discriminative(&mut a, &m).unwrap();
        let back = read_discriminative(&mut a.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut b = Vec::new();
        write_discriminative(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generative_round_trip() {
        let spec = GenerativeSpec {
            input_dim: 5,
            latent_dim: 2,
            intermediate_dim: 3,
            head_hidden: vec![],
            shared_hidden: vec![4],
        };
        let mut g = GenerativeModel::new(&spec, PriorSpec::standard()).unwrap();
        let mut r = stream(2, &[]);
        g.add_task(0, &mut r).unwrap();
        g.add_task(3, &mut r).unwrap();
        let mut a = Vec::new();
        write_generative(&mut a, &g).unwrap();
        assert_eq!(read_generative(&mut a.as_slice()).unwrap(), g);
    }

    #[test]
    fn point_round_trip_and_kind_check() {
        let arch = ArchitectureSpec::single_head(3, vec![2], 2);
        let net = PointNet::new_random(&arch, &mut stream(0, &[])).unwrap();
        let mut a = Vec::new();
        write_point_net(&mut a, &net).unwrap();
        assert_eq!(read_point_net(&mut a.as_slice()).unwrap(), net);
        assert!(matches!(read_discriminative(&mut a.as_slice()), Err(Error::Format(_))));
    }
}
