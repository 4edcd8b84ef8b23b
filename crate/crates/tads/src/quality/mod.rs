//! Learned quality scoring.
//!
//! Every sample is summarized by a fixed-order feature vector mixing values
//! computed from the corpus (resolution, caption statistics, image-text
//! alignment) with scalar perception-operator outputs ingested alongside the
//! records (blur, OCR coverage, language confidence, ...). Threshold-rule
//! labeling functions vote on these features, a small EM label model turns
//! the votes into probabilistic weak labels, and an MLP head trains against
//! a hybrid of weak labels and a small synthetically constructed gold set.

mod labeling;
mod predictor;

pub use labeling::{
    apply_lfs, default_labeling_functions, fit_label_model, weak_labels, Comparator,
    LabelModel, LabelingFunction,
};
pub use predictor::{
    build_true_label_set, hybrid_loss, predict_quality, roc_auc, train_quality_predictor,
    LabelProvenance, QualityPredictor, QualityTrainConfig, TrueLabelEntry, TrueLabelSet,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingBlock, SampleRecord};
use crate::error::{Result, TadsError};
use crate::numeric::{cosine_similarity, DenseMatrix};

pub const FEATURE_DIM: usize = 13;

/// Feature fields in vector order. Starred fields in the documentation are
/// the ingested perception-operator outputs; they impute to 0.5 with a mask
/// bit when a record does not carry them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureField {
    ResolutionNorm,
    AspectRatioNorm,
    BlurScore,
    OcrRegionRatio,
    LangConfidence,
    Concreteness,
    CaptionLenNorm,
    TokenCountNorm,
    ClipCosine,
    FlippedConsistency,
    GroundingBoxCountNorm,
    GroundingConfidence,
    OcrCaptionInfoGain,
}

impl FeatureField {
    pub const ALL: [FeatureField; FEATURE_DIM] = [
        FeatureField::ResolutionNorm,
        FeatureField::AspectRatioNorm,
        FeatureField::BlurScore,
        FeatureField::OcrRegionRatio,
        FeatureField::LangConfidence,
        FeatureField::Concreteness,
        FeatureField::CaptionLenNorm,
        FeatureField::TokenCountNorm,
        FeatureField::ClipCosine,
        FeatureField::FlippedConsistency,
        FeatureField::GroundingBoxCountNorm,
        FeatureField::GroundingConfidence,
        FeatureField::OcrCaptionInfoGain,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).expect("field is in ALL")
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureField::ResolutionNorm => "resolution_norm",
            FeatureField::AspectRatioNorm => "aspect_ratio_norm",
            FeatureField::BlurScore => "blur_score",
            FeatureField::OcrRegionRatio => "ocr_region_ratio",
            FeatureField::LangConfidence => "lang_confidence",
            FeatureField::Concreteness => "concreteness",
            FeatureField::CaptionLenNorm => "caption_len_norm",
            FeatureField::TokenCountNorm => "token_count_norm",
            FeatureField::ClipCosine => "clip_cosine",
            FeatureField::FlippedConsistency => "flipped_consistency",
            FeatureField::GroundingBoxCountNorm => "grounding_box_count_norm",
            FeatureField::GroundingConfidence => "grounding_confidence",
            FeatureField::OcrCaptionInfoGain => "ocr_caption_info_gain",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == name)
            .ok_or_else(|| TadsError::InvalidConfig(format!("unknown feature field '{name}'")))
    }

    /// Whether this field is ingested from perception operators (and hence
    /// subject to imputation) rather than computed from corpus data.
    pub fn is_ingested(self) -> bool {
        matches!(
            self,
            FeatureField::BlurScore
                | FeatureField::OcrRegionRatio
                | FeatureField::LangConfidence
                | FeatureField::Concreteness
                | FeatureField::FlippedConsistency
                | FeatureField::GroundingBoxCountNorm
                | FeatureField::GroundingConfidence
        )
    }
}

/// Fixed-order sample features, all in [0, 1], with an imputation mask over
/// the ingested fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorFeatureVector {
    pub values: [f64; FEATURE_DIM],
    pub imputed: [bool; FEATURE_DIM],
}

impl OperatorFeatureVector {
    pub fn get(&self, field: FeatureField) -> f64 {
        self.values[field.index()]
    }

    pub fn is_imputed(&self, field: FeatureField) -> bool {
        self.imputed[field.index()]
    }
}

const RESOLUTION_SCALE: f64 = 1e6;
const CAPTION_CHAR_SCALE: f64 = 256.0;
const CAPTION_TOKEN_SCALE: f64 = 32.0;

/// Features for a record against its own embeddings. `ocr_embeddings`, when
/// supplied, is row-aligned with the corpus block and carries text
/// embeddings of each sample's OCR string.
pub fn extract_features(
    rec: &SampleRecord,
    block: &EmbeddingBlock,
    ocr_embeddings: Option<&DenseMatrix>,
) -> Result<OperatorFeatureVector> {
    extract_features_crossed(rec, rec, block, ocr_embeddings)
}

/// Features for an image record paired with (possibly another record's)
/// caption and text embedding. Image-side fields come from `img_rec`,
/// text-side fields from `txt_rec`, and cross-modal fields are recomputed
/// from the crossed embeddings. With `img_rec == txt_rec` this is the plain
/// feature extraction; with different records it builds the mismatched
/// entries of the gold label set.
pub fn extract_features_crossed(
    img_rec: &SampleRecord,
    txt_rec: &SampleRecord,
    block: &EmbeddingBlock,
    ocr_embeddings: Option<&DenseMatrix>,
) -> Result<OperatorFeatureVector> {
    let image = block.image_row(img_rec.embedding_index)?;
    let text = block.text_row(txt_rec.embedding_index)?;

    let mut values = [0.0; FEATURE_DIM];
    let mut imputed = [false; FEATURE_DIM];

    values[FeatureField::ResolutionNorm.index()] =
        img_rec.pixel_count().map_or(0.0, |p| (p as f64 / RESOLUTION_SCALE).min(1.0));
    values[FeatureField::AspectRatioNorm.index()] = match (img_rec.width_px, img_rec.height_px) {
        (Some(w), Some(h)) => f64::from(w.min(h)) / f64::from(w.max(h)),
        _ => 0.0,
    };

    let chars = txt_rec.caption.chars().count() as f64;
    values[FeatureField::CaptionLenNorm.index()] = (chars / CAPTION_CHAR_SCALE).min(1.0);
    let tokens = txt_rec.caption.split_whitespace().count() as f64;
    values[FeatureField::TokenCountNorm.index()] = (tokens / CAPTION_TOKEN_SCALE).min(1.0);

    let cos = cosine_similarity(image, text)?;
    values[FeatureField::ClipCosine.index()] = (cos + 1.0) / 2.0;

    values[FeatureField::OcrCaptionInfoGain.index()] = match ocr_embeddings {
        Some(ocr) if img_rec.ocr_text.is_some() => {
            let ocr_row = ocr.try_row(img_rec.embedding_index)?;
            (1.0 - cosine_similarity(text, ocr_row)?) / 2.0
        }
        // No embedded text to overlap with: the caption is pure gain.
        _ => 1.0,
    };

    for field in FeatureField::ALL {
        if !field.is_ingested() {
            continue;
        }
        let source = match field {
            FeatureField::LangConfidence | FeatureField::Concreteness => txt_rec,
            _ => img_rec,
        };
        match source.ingested_operator_fields.get(field.name()) {
            Some(&v) => values[field.index()] = v.clamp(0.0, 1.0),
            None => {
                values[field.index()] = 0.5;
                imputed[field.index()] = true;
            }
        }
    }

    Ok(OperatorFeatureVector { values, imputed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::normalize;
    use std::collections::BTreeMap;

    pub(crate) fn block_of(image_rows: Vec<Vec<f64>>, text_rows: Vec<Vec<f64>>) -> EmbeddingBlock {
        EmbeddingBlock::new(
            DenseMatrix::from_rows(&image_rows).unwrap(),
            DenseMatrix::from_rows(&text_rows).unwrap(),
        )
        .unwrap()
    }

    pub(crate) fn axis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i % dim] = 1.0;
        v
    }

    fn bare_record(idx: usize) -> SampleRecord {
        SampleRecord {
            id: format!("r{idx}"),
            url: None,
            content_hash: None,
            width_px: None,
            height_px: None,
            caption: "six words in this exact caption".into(),
            ocr_text: None,
            embedding_index: idx,
            ingested_operator_fields: BTreeMap::new(),
        }
    }

    #[test]
    fn missing_operators_impute_half_with_full_mask() {
        let block = block_of(vec![axis(4, 0)], vec![axis(4, 0)]);
        let fv = extract_features(&bare_record(0), &block, None).unwrap();
        for field in FeatureField::ALL {
            if field.is_ingested() {
                assert_eq!(fv.get(field), 0.5, "{}", field.name());
                assert!(fv.is_imputed(field), "{}", field.name());
            } else {
                assert!(!fv.is_imputed(field), "{}", field.name());
            }
        }
    }

    #[test]
    fn perfect_alignment_remaps_to_one() {
        let block = block_of(vec![axis(4, 0)], vec![axis(4, 0)]);
        let fv = extract_features(&bare_record(0), &block, None).unwrap();
        assert_eq!(fv.get(FeatureField::ClipCosine), 1.0);
    }

    #[test]
    fn caption_matching_ocr_has_zero_gain() {
        let block = block_of(vec![axis(4, 0)], vec![axis(4, 1)]);
        let mut rec = bare_record(0);
        rec.ocr_text = Some("the caption text again".into());
        let ocr = DenseMatrix::from_rows(&[axis(4, 1)]).unwrap();
        let fv = extract_features(&rec, &block, Some(&ocr)).unwrap();
        assert_eq!(fv.get(FeatureField::OcrCaptionInfoGain), 0.0);
        // Without an OCR embedding the caption is pure gain.
        let fv = extract_features(&rec, &block, None).unwrap();
        assert_eq!(fv.get(FeatureField::OcrCaptionInfoGain), 1.0);
    }

    #[test]
    fn geometry_and_caption_scales() {
        let block = block_of(vec![axis(4, 0)], vec![axis(4, 0)]);
        let mut rec = bare_record(0);
        rec.width_px = Some(2000);
        rec.height_px = Some(1000);
        rec.caption = "x".repeat(512);
        rec.ingested_operator_fields.insert("blur_score".into(), 0.9);
        let fv = extract_features(&rec, &block, None).unwrap();
        // 2e6 pixels saturates resolution; 512 chars saturate caption length.
        assert_eq!(fv.get(FeatureField::ResolutionNorm), 1.0);
        assert_eq!(fv.get(FeatureField::AspectRatioNorm), 0.5);
        assert_eq!(fv.get(FeatureField::CaptionLenNorm), 1.0);
        assert_eq!(fv.get(FeatureField::BlurScore), 0.9);
        assert!(!fv.is_imputed(FeatureField::BlurScore));
        assert!(fv.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crossed_features_split_sides() {
        let mut i0 = axis(4, 0);
        let mut t1 = axis(4, 1);
        normalize(&mut i0).unwrap();
        normalize(&mut t1).unwrap();
        let block = block_of(vec![i0, axis(4, 2)], vec![axis(4, 0), t1]);
        let mut img_rec = bare_record(0);
        img_rec.ingested_operator_fields.insert("blur_score".into(), 0.9);
        let mut txt_rec = bare_record(1);
        txt_rec.caption = "short".into();
        txt_rec.ingested_operator_fields.insert("lang_confidence".into(), 0.3);
        let fv = extract_features_crossed(&img_rec, &txt_rec, &block, None).unwrap();
        assert_eq!(fv.get(FeatureField::BlurScore), 0.9);
        assert_eq!(fv.get(FeatureField::LangConfidence), 0.3);
        assert_eq!(fv.get(FeatureField::CaptionLenNorm), 5.0 / 256.0);
        // Image 0 against text 1: orthogonal axes, remapped cosine 0.5.
        assert!((fv.get(FeatureField::ClipCosine) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn field_parse_roundtrip() {
        for field in FeatureField::ALL {
            assert_eq!(FeatureField::parse(field.name()).unwrap(), field);
        }
        assert!(matches!(FeatureField::parse("nope"), Err(TadsError::InvalidConfig(_))));
    }
}
