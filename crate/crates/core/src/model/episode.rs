use crate::preprocess::{ProcessedMatrix, Targets};
use crate::scalar::Scalar;

use super::ModelError;

/// One model input: a labeled support set plus the query rows to predict.
/// `y_query` is present during training and absent at pure inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<F: Scalar> {
    pub x_support: ProcessedMatrix<F>,
    pub y_support: Targets<F>,
    pub x_query: ProcessedMatrix<F>,
    pub y_query: Option<Targets<F>>,
    /// Size of the label space for classification episodes.
    pub n_classes: Option<usize>,
}

impl<F: Scalar> Episode<F> {
    pub fn new(
        x_support: ProcessedMatrix<F>,
        y_support: Targets<F>,
        x_query: ProcessedMatrix<F>,
        y_query: Option<Targets<F>>,
        n_classes: Option<usize>,
    ) -> Result<Self, ModelError> {
        let e = Self { x_support, y_support, x_query, y_query, n_classes };
        e.validate()?;
        Ok(e)
    }

    pub fn n_support(&self) -> usize {
        self.x_support.n_rows()
    }

    pub fn n_query(&self) -> usize {
        self.x_query.n_rows()
    }

    pub fn width(&self) -> usize {
        self.x_support.width()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.n_support() == 0 || self.n_query() == 0 {
            return Err(ModelError::InvalidEpisode("support and query must both be non-empty".into()));
        }
        if self.x_support.width() != self.x_query.width() {
            return Err(ModelError::DimensionMismatch(format!(
                "support width {} != query width {}",
                self.x_support.width(),
                self.x_query.width()
            )));
        }
        if self.y_support.len() != self.n_support() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} support labels for {} support rows",
                self.y_support.len(),
                self.n_support()
            )));
        }
        if let Some(yq) = &self.y_query {
            if yq.len() != self.n_query() {
                return Err(ModelError::DimensionMismatch(format!(
                    "{} query labels for {} query rows",
                    yq.len(),
                    self.n_query()
                )));
            }
        }
        if let Some(k) = self.n_classes {
            if k == 0 {
                return Err(ModelError::InvalidEpisode("empty class space".into()));
            }
            let check = |t: &Targets<F>| -> Result<(), ModelError> {
                if let Targets::Classes(v) = t {
                    if let Some(&bad) = v.iter().find(|&&c| c >= k) {
                        return Err(ModelError::InvalidEpisode(format!(
                            "class index {bad} outside 0..{k}"
                        )));
                    }
                }
                Ok(())
            };
            check(&self.y_support)?;
            if let Some(yq) = &self.y_query {
                check(yq)?;
            }
        }
        Ok(())
    }
}
