use std::sync::Arc;

use crate::autodiff::Graph;
use crate::distributions::{CategoricalDist, LogisticMixture1D};
use crate::error::ModelError;
use crate::scene::FloorMask;
use crate::tensor::{Real, Tensor};

use super::{Model, ObjectCode};

/// Transformer output `q̂` for one context, `[1, d_model]`.
#[derive(Debug, Clone)]
pub struct QueryVector<S: Real> {
    value: Arc<Tensor<S>>,
}

impl<S: Real> QueryVector<S> {
    pub fn values(&self) -> &[S] {
        self.value.data()
    }
}

/// A model with the layout feature of one floor precomputed.
pub struct Conditioner<'m, S: Real> {
    model: &'m Model<S>,
    floor: Arc<Tensor<S>>,
}

/// Attributes of the next object already fixed, in chain order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AttributePrefix {
    pub category: Option<usize>,
    pub location: Option<[f64; 3]>,
    pub orientation: Option<f64>,
}

/// Predicted distributions of the next object. Later heads are present only
/// when the prefix they condition on was given.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDistributionSet {
    pub category: CategoricalDist,
    pub location: Option<Vec<LogisticMixture1D>>,
    pub orientation: Option<LogisticMixture1D>,
    pub size: Option<Vec<LogisticMixture1D>>,
}

fn mixture_diff(a: &LogisticMixture1D, b: &LogisticMixture1D) -> f64 {
    let pairs = [
        (a.weights(), b.weights()),
        (a.means(), b.means()),
        (a.scales(), b.scales()),
    ];
    pairs
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn option_diff(a: Option<&[LogisticMixture1D]>, b: Option<&[LogisticMixture1D]>) -> f64 {
    match (a, b) {
        (None, None) => 0.0,
        (Some(x), Some(y)) if x.len() == y.len() => {
            x.iter().zip(y).map(|(p, q)| mixture_diff(p, q)).fold(0.0, f64::max)
        }
        _ => f64::INFINITY,
    }
}

impl AttributeDistributionSet {
    /// Largest absolute difference over every logit, weight, mean and scale.
    /// Infinite when the two sets hold different heads.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let logits = self
            .category
            .logits()
            .iter()
            .zip(other.category.logits())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ori = option_diff(
            self.orientation.as_ref().map(std::slice::from_ref),
            other.orientation.as_ref().map(std::slice::from_ref),
        );
        logits
            .max(option_diff(self.location.as_deref(), other.location.as_deref()))
            .max(ori)
            .max(option_diff(self.size.as_deref(), other.size.as_deref()))
    }
}

impl<S: Real> Model<S> {
    pub fn conditioner(&self, floor: &FloorMask) -> Result<Conditioner<'_, S>, ModelError> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let f = self.layout_features(&g, &b, &[floor])?;
        Ok(Conditioner {
            model: self,
            floor: g.value(f),
        })
    }

    fn with_query<T>(
        &self,
        q: &QueryVector<S>,
        f: impl FnOnce(&Graph<S>, &super::Bound, crate::autodiff::Var) -> Result<T, ModelError>,
    ) -> Result<T, ModelError> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let qv = g.leaf_shared(Arc::clone(&q.value), false);
        f(&g, &b, qv)
    }

    fn conditioning_category(&self, category: usize) -> Result<(), ModelError> {
        let classes = self.config.categories();
        if category == classes {
            return Err(ModelError::EndSymbol("a conditioning category"));
        }
        if category > classes {
            return Err(ModelError::CategoryOutOfRange { category, classes });
        }
        Ok(())
    }

    fn row_f64(t: &Tensor<S>) -> Vec<f64> {
        t.data().iter().map(|v| v.f64()).collect()
    }

    pub fn category_dist(&self, q: &QueryVector<S>) -> Result<CategoricalDist, ModelError> {
        let raw = self.with_query(q, |g, b, qv| Ok(g.value(self.category_logits(g, b, qv)?)))?;
        Ok(CategoricalDist::new(Self::row_f64(&raw))?)
    }

    /// Three per-axis location mixtures for an object of `category`.
    pub fn location_dists(&self, q: &QueryVector<S>, category: usize) -> Result<Vec<LogisticMixture1D>, ModelError> {
        self.conditioning_category(category)?;
        let raw = self.with_query(q, |g, b, qv| Ok(g.value(self.location_raw(g, b, qv, &[category])?)))?;
        Ok(LogisticMixture1D::from_raw_row(&Self::row_f64(&raw), 3)?)
    }

    pub fn orientation_dist(
        &self,
        q: &QueryVector<S>,
        category: usize,
        location: [f64; 3],
    ) -> Result<LogisticMixture1D, ModelError> {
        self.conditioning_category(category)?;
        let raw = self.with_query(q, |g, b, qv| {
            Ok(g.value(self.orientation_raw(g, b, qv, &[category], &[location])?))
        })?;
        Ok(LogisticMixture1D::from_raw(&Self::row_f64(&raw))?)
    }

    pub fn size_dists(
        &self,
        q: &QueryVector<S>,
        category: usize,
        location: [f64; 3],
        orientation: f64,
    ) -> Result<Vec<LogisticMixture1D>, ModelError> {
        self.conditioning_category(category)?;
        let raw = self.with_query(q, |g, b, qv| {
            Ok(g.value(self.size_raw(g, b, qv, &[category], &[location], &[orientation])?))
        })?;
        Ok(LogisticMixture1D::from_raw_row(&Self::row_f64(&raw), 3)?)
    }

    /// Evaluates the heads the prefix allows: category always, location once
    /// the category is fixed, orientation once the location is fixed, size
    /// once the orientation is fixed.
    pub fn extract_attributes(
        &self,
        q: &QueryVector<S>,
        prefix: &AttributePrefix,
    ) -> Result<AttributeDistributionSet, ModelError> {
        if prefix.location.is_some() && prefix.category.is_none() {
            return Err(ModelError::MissingPrefix {
                head: "orientation",
                missing: "category",
            });
        }
        if prefix.orientation.is_some() && prefix.location.is_none() {
            return Err(ModelError::MissingPrefix {
                head: "size",
                missing: "location",
            });
        }
        let mut set = AttributeDistributionSet {
            category: self.category_dist(q)?,
            location: None,
            orientation: None,
            size: None,
        };
        if let Some(c) = prefix.category {
            set.location = Some(self.location_dists(q, c)?);
            if let Some(t) = prefix.location {
                set.orientation = Some(self.orientation_dist(q, c, t)?);
                if let Some(r) = prefix.orientation {
                    set.size = Some(self.size_dists(q, c, t, r)?);
                }
            }
        }
        Ok(set)
    }
}

impl<'m, S: Real> Conditioner<'m, S> {
    pub fn model(&self) -> &'m Model<S> {
        self.model
    }

    /// `q̂` for `context` taken in the given order.
    pub fn query(&self, context: &[ObjectCode]) -> Result<QueryVector<S>, ModelError> {
        let g = Graph::new();
        let b = self.model.bind(&g, false);
        let f = g.leaf_shared(Arc::clone(&self.floor), false);
        let q = self.model.query_features(&g, &b, f, &[context])?;
        Ok(QueryVector { value: g.value(q) })
    }

    /// Exact log-density of `target` (or the end symbol) given `context`,
    /// in model-frame units.
    pub fn log_prob(&self, context: &[ObjectCode], target: Option<&ObjectCode>) -> Result<f64, ModelError> {
        let q = self.query(context)?;
        let m = self.model;
        let cat = m.category_dist(&q)?;
        let Some(t) = target else {
            return Ok(cat.log_prob(m.config.end_symbol())?);
        };
        m.check_category(t.category)?;
        let mut lp = cat.log_prob(t.category)?;
        for (d, x) in m.location_dists(&q, t.category)?.iter().zip(t.location) {
            lp += d.log_prob(x);
        }
        lp += m.orientation_dist(&q, t.category, t.location)?.log_prob(t.orientation);
        for (d, x) in m
            .size_dists(&q, t.category, t.location, t.orientation)?
            .iter()
            .zip(t.size)
        {
            lp += d.log_prob(x);
        }
        Ok(lp)
    }
}
