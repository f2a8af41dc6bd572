use crate::models::{Model, ModelError};
use crate::phantom::Dataset;
use crate::tensor::Element;

/// Argmax-decision classification metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    /// Recall of each true class; 0 when the class is absent.
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassMetrics {
    pub fn from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&l, &p) in labels.iter().zip(preds) {
            confusion[l][p] += 1;
        }
        let total: usize = labels.len();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let recall = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        ClassMetrics {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            recall,
            confusion,
        }
    }
}

/// Inference-mode predictions for every image, in dataset order.
pub fn predict_labels<T: Element>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<Vec<usize>, ModelError> {
    let k = model.config().classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let logits = model.predict(&data.batch(chunk))?;
        for row in logits.data().chunks_exact(k) {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn evaluate_classification<T: Element>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<ClassMetrics, ModelError> {
    let preds = predict_labels(model, data, batch)?;
    Ok(ClassMetrics::from_predictions(data.labels(), &preds, model.config().classes))
}
