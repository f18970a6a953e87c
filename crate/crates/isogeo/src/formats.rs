//! On-disk formats: sampled batches, training logs and network weights.

use std::path::Path;

use isogeo_core::data::{GaussianNuisanceModel, LabeledBatch};
use isogeo_core::objectives::TrainLog;
use isogeo_core::{Activation, Layer, Matrix, MlpEncoderDecoder};

use crate::emit::write_atomic;
use crate::error::{HarnessError, Result};
use crate::table::format_float;

/// Magic prefix of the binary network format.
pub const MODEL_MAGIC: &[u8; 8] = b"ISOGEO1\n";

/// Header `s_1..s_{d_s}, n_1..n_{d_n}, y`, one sample per line.
pub fn batch_to_csv(model: &GaussianNuisanceModel, batch: &LabeledBatch) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=model.d_s())
        .map(|i| format!("s_{i}"))
        .chain((1..=model.d_n()).map(|i| format!("n_{i}")))
        .chain(std::iter::once("y".to_string()))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..batch.len() {
        let row: Vec<String> = batch.x.row(i).iter().chain(std::iter::once(&batch.y[i])).map(|&v| format_float(v)).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// Columns `step, task_loss, pmh_loss, eff_lambda, fraction, warmup, sigma`.
pub fn train_log_to_csv(log: &TrainLog) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "task_loss", "pmh_loss", "eff_lambda", "fraction", "warmup", "sigma"])
        .map_err(csv_err)?;
    for r in &log.records {
        w.write_record([
            r.step.to_string(),
            format_float(r.task_loss),
            format_float(r.pmh_loss),
            format_float(r.eff_lambda),
            format_float(r.fraction),
            format_float(r.warmup),
            format_float(r.sigma),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| HarnessError::format("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::format("csv", e.to_string()))
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::format("csv", e.to_string())
}

/// Little-endian layout: magic, `u32` layer count (encoder layers then the
/// decoder), then per layer an activation tag byte, `u32` output and input
/// widths, the row-major weights and the bias as `f64`.
pub fn encode_model(net: &MlpEncoderDecoder) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    let layers: Vec<&Layer> = net.encoder().iter().chain(std::iter::once(net.decoder())).collect();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.push(l.activation.tag());
        out.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
        for v in l.weight.as_slice().iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| HarnessError::format("model file", "truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| HarnessError::format("model file", "layer too large"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpEncoderDecoder> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(HarnessError::format("model file", "bad magic"));
    }
    let count = c.u32()?;
    if count < 2 {
        return Err(HarnessError::format("model file", "needs an encoder layer and a decoder"));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = c.take(1)?[0];
        let activation = Activation::from_tag(tag).ok_or_else(|| HarnessError::format("model file", format!("activation tag {tag}")))?;
        let (rows, cols) = (c.u32()?, c.u32()?);
        let weight = Matrix::from_vec(rows, cols, c.f64s(rows * cols)?)?;
        let bias = c.f64s(rows)?;
        layers.push(Layer::new(weight, bias, activation)?);
    }
    if c.at != bytes.len() {
        return Err(HarnessError::format("model file", "trailing bytes"));
    }
    let decoder = layers.pop().expect("count >= 2");
    Ok(MlpEncoderDecoder::new(layers, decoder)?)
}

pub fn save_model(net: &MlpEncoderDecoder, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(net))
}

pub fn load_model(path: &Path) -> Result<MlpEncoderDecoder> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use isogeo_core::{ModelSpec, RngState};

    fn net() -> MlpEncoderDecoder {
        MlpEncoderDecoder::init(&ModelSpec::new(3, vec![4, 2], Activation::Tanh, 1), &mut RngState::new(5)).unwrap()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let n = net();
        let back = decode_model(&encode_model(&n)).unwrap();
        assert_eq!(back.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), n.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.depth(), 2);
        assert_eq!(back.encoder()[0].activation, Activation::Tanh);
    }

    #[test]
    fn corrupt_model_files_are_rejected() {
        let bytes = encode_model(&net());
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_model(b"NOTMODEL").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut tag = bytes;
        tag[12] = 99;
        assert!(decode_model(&tag).is_err());
    }

    #[test]
    fn batch_csv_has_named_columns() {
        let m = GaussianNuisanceModel::new(2, 1, 0.5, 0.1).unwrap();
        let b = m.sample(3, &mut RngState::new(1));
        let text = batch_to_csv(&m, &b).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("s_1,s_2,n_1,y"));
        assert_eq!(lines.count(), 3);
    }
}
