//! Small differentiable segmenter: handcrafted features, a `tanh` embedding
//! layer and a softmax classifier.

pub mod contrastive;
pub mod features;
pub mod loss;
pub mod network;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use contrastive::{contrastive_loss, poor_classes, ContrastiveBatch, ContrastiveConfig, ContrastiveLoss};
pub use features::{extract_features, feature_dim, FeatureMap};
pub use loss::{loss_and_grad, loss_value, plan_contrastive, ContrastivePlan, LossBreakdown, PixelSet};
pub use network::{forward, predict, Gradients, ModelParams, DEFAULT_EMBED_DIM};
pub use train::{fit, FitReport, Sgd, TrainConfig};

use crate::alrt::{read_tensor, write_tensor, Tensor, TensorData};
use crate::error::{Error, Result};

/// Sidecar stored next to saved parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub d_feat: usize,
    pub d_emb: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Writes the embedding layer as a `(d_feat + 1) x d_emb` tensor and the
/// classifier as a `(d_emb + 1) x C` tensor; the bias is the last row.
pub fn write_params(w: &mut impl Write, p: &ModelParams) -> Result<()> {
    let mut embed = p.w_embed.clone();
    embed.extend_from_slice(&p.b_embed);
    write_tensor(w, &Tensor::f64(vec![p.d_feat + 1, p.d_emb], embed))?;
    let mut cls = p.w_cls.clone();
    cls.extend_from_slice(&p.b_cls);
    write_tensor(w, &Tensor::f64(vec![p.d_emb + 1, p.num_classes], cls))
}

pub fn read_params(r: &mut impl Read) -> Result<ModelParams> {
    let split = |t: Tensor| -> Result<(usize, usize, Vec<f64>)> {
        match (t.dims.as_slice(), t.data) {
            (&[rows, cols], TensorData::F64(v)) if rows >= 2 => Ok((rows - 1, cols, v)),
            _ => Err(Error::InvalidTensor("model layers are 2-D f64 tensors".into())),
        }
    };
    let (d_feat, d_emb, mut w_embed) = split(read_tensor(r)?)?;
    let (d_emb2, c, mut w_cls) = split(read_tensor(r)?)?;
    if d_emb2 != d_emb {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {d_emb} vs classifier input {d_emb2}"
        )));
    }
    let b_embed = w_embed.split_off(d_feat * d_emb);
    let b_cls = w_cls.split_off(d_emb * c);
    Ok(ModelParams {
        d_feat,
        d_emb,
        num_classes: c,
        w_embed,
        b_embed,
        w_cls,
        b_cls,
    })
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: impl AsRef<Path>, p: &ModelParams, seed: u64, epoch: usize) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, p)?;
    w.flush()?;
    let meta = ModelMeta {
        d_feat: p.d_feat,
        d_emb: p.d_emb,
        num_classes: p.num_classes,
        seed,
        epoch,
    };
    std::fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, ModelMeta)> {
    let path = path.as_ref();
    let params = read_params(&mut BufReader::new(File::open(path)?))?;
    let meta: ModelMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    if (meta.d_feat, meta.d_emb, meta.num_classes) != (params.d_feat, params.d_emb, params.num_classes) {
        return Err(Error::DimensionMismatch(
            "sidecar dimensions disagree with the stored tensors".into(),
        ));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        let p = ModelParams::init(7, 4, 3, 5);
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(read_params(&mut buf.as_slice()).unwrap(), p);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.alrt");
        save_model(&path, &p, 9, 100).unwrap();
        let (q, meta) = load_model(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(meta.epoch, 100);
        let json = std::fs::read_to_string(dir.path().join("model.alrt.json")).unwrap();
        assert!(json.contains("\"C\": 3"));
    }
}
