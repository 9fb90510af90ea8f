//! Inference at the original image resolution.

use image::{GrayImage, RgbImage};

use super::data::SampleSource;
use crate::error::Result;
use crate::labels::LabelMap;
use crate::metrics::{evaluate_pairs, Evaluation};
use crate::model::resize::resize_bilinear;
use crate::model::{preprocess, StudentModel};

/// Output of [`predict_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Arg-max of the fine head, labels `0..=K`.
    pub classes: LabelMap,
    /// Foreground probability of the binary head, raster order.
    pub foreground: Vec<f32>,
}

impl Prediction {
    /// Foreground probabilities quantized to 8 bits.
    pub fn foreground_image(&self) -> GrayImage {
        let (w, h) = self.classes.dims();
        let data = self
            .foreground
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::from_raw(w, h, data).expect("foreground has one value per pixel")
    }
}

/// Runs the model on one image. Logits are resized back to the image size
/// before the arg-max; ties go to the lowest label.
pub fn predict_image(model: &StudentModel, image: &RgbImage) -> Result<Prediction> {
    let size = model.config().input_size;
    let (w, h) = image.dimensions();
    let x = preprocess(image, size)?.unsqueeze(0)?;
    let out = model.forward(&x, false)?;
    let restore = |t: &candle_core::Tensor| -> Result<Vec<f32>> {
        let t = if (h as usize, w as usize) == (size, size) {
            t.clone()
        } else {
            resize_bilinear(t, h as usize, w as usize)?
        };
        Ok(t.flatten_all()?.to_vec1()?)
    };
    let fine = restore(&out.fine_logits)?;
    let binary = restore(&out.binary_logits)?;
    let plane = (w * h) as usize;
    let labels = fine.len() / plane;
    let classes: Vec<u8> = (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..labels {
                if fine[c * plane + i] > fine[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let foreground = (0..plane)
        .map(|i| 1.0 / (1.0 + (binary[i] - binary[plane + i]).exp()))
        .collect();
    Ok(Prediction {
        classes: LabelMap::from_vec(w, h, classes)?,
        foreground,
    })
}

/// Predictions for every sample of `source`, in order, with their labels.
pub fn predict_source(
    model: &StudentModel,
    source: &dyn SampleSource,
) -> Result<Vec<(String, Prediction, LabelMap)>> {
    (0..source.len())
        .map(|i| {
            let s = source.load(i)?;
            Ok((s.image_id, predict_image(model, &s.image)?, s.labels))
        })
        .collect()
}

/// Predicts every sample and scores it against the sample's labels.
pub fn evaluate_model(
    model: &StudentModel,
    source: &dyn SampleSource,
    ignore: Option<u8>,
) -> Result<Evaluation> {
    let pairs: Vec<(String, LabelMap, LabelMap)> = predict_source(model, source)?
        .into_iter()
        .map(|(id, p, gt)| (id, p.classes, gt))
        .collect();
    evaluate_pairs(&pairs, model.config().num_classes + 1, ignore)
}
