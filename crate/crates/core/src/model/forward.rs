use crate::autodiff::{Graph, Var};
use crate::distributions::mixture_log_prob;
use crate::error::ModelError;
use crate::scene::FloorMask;
use crate::tensor::{Real, Tensor};

use super::{index_embedding, Bound, Linear, Model, Norm, ObjectCode};

const LN_EPS: f64 = 1e-5;

/// One next-object prediction problem: a floor, the objects already placed
/// (in presentation order) and the object to predict, `None` for the end
/// symbol.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub floor: &'a FloorMask,
    pub context: Vec<ObjectCode>,
    pub target: Option<ObjectCode>,
}

/// Negative log-likelihoods of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchNll {
    /// `[B]` per-example NLL.
    pub per_example: Var,
    /// Scalar sum over the batch.
    pub total: Var,
}

impl<S: Real> Model<S> {
    fn linear(&self, g: &Graph<S>, b: &Bound, x: Var, l: Linear) -> Result<Var, ModelError> {
        let y = g.matmul(x, b.var(l.w))?;
        Ok(g.add_row(y, b.var(l.b))?)
    }

    fn mlp(&self, g: &Graph<S>, b: &Bound, mut x: Var, layers: &[Linear]) -> Result<Var, ModelError> {
        for (i, &l) in layers.iter().enumerate() {
            x = self.linear(g, b, x, l)?;
            if i + 1 < layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    fn norm(&self, g: &Graph<S>, b: &Bound, x: Var, n: Norm) -> Result<Var, ModelError> {
        Ok(g.layer_norm(x, b.var(n.gamma), b.var(n.beta), LN_EPS)?)
    }

    /// Floor feature `F` for each mask: `[B, d_model]`.
    pub fn layout_features(&self, g: &Graph<S>, b: &Bound, masks: &[&FloorMask]) -> Result<Var, ModelError> {
        let r = self.config.floor_resolution;
        let mut data = Vec::with_capacity(masks.len() * r * r);
        for m in masks {
            if m.resolution() != r {
                return Err(ModelError::Resolution {
                    got: m.resolution(),
                    expected: r,
                });
            }
            data.extend(m.cells().iter().map(|&c| if c == 1 { S::one() } else { S::zero() }));
        }
        let mut x = g.constant(Tensor::new(vec![masks.len(), 1, r, r], data)?);
        for &conv in &self.ids.convs {
            x = g.conv2d(x, b.var(conv.w), b.var(conv.b), 2, 1)?;
            x = g.relu(x);
        }
        let pooled = g.mean_spatial(x)?;
        self.linear(g, b, pooled, self.ids.layout_proj)
    }

    /// Context tokens `C_j`: `[N, d_model]`. `positions` adds index
    /// embeddings, used only by the ordered ablation modes.
    pub fn object_tokens(
        &self,
        g: &Graph<S>,
        b: &Bound,
        objects: &[ObjectCode],
        positions: Option<&[usize]>,
    ) -> Result<Var, ModelError> {
        for o in objects {
            self.check_category(o.category)?;
        }
        let cats: Vec<usize> = objects.iter().map(|o| o.category).collect();
        let attrs: Vec<S> = objects.iter().flat_map(|o| o.attributes()).map(S::of).collect();
        let emb = g.gather_rows(b.var(self.ids.embed), &cats)?;
        let attrs = g.constant(Tensor::new(vec![objects.len(), 7], attrs)?);
        let enc = g.sinusoid(attrs, self.config.octaves)?;
        let feat = g.concat_cols(&[emb, enc])?;
        let tokens = self.linear(g, b, feat, self.ids.object_proj)?;
        match positions {
            None => Ok(tokens),
            Some(pos) => {
                let d = self.config.d_model;
                let data = pos.iter().flat_map(|&p| index_embedding(p, d)).map(S::of).collect();
                let pe = g.constant(Tensor::new(vec![pos.len(), d], data)?);
                Ok(g.add(tokens, pe)?)
            }
        }
    }

    /// Transformer output at the query position for each example: `[B, d_model]`.
    /// `floors` holds one `F` row per example; each context is taken in the
    /// given order (order matters only when the mode adds index embeddings).
    pub fn query_features(
        &self,
        g: &Graph<S>,
        b: &Bound,
        floors: Var,
        contexts: &[&[ObjectCode]],
    ) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let batch = contexts.len();
        let objects: Vec<ObjectCode> = contexts.iter().flat_map(|c| c.iter().copied()).collect();
        let n = objects.len();
        let mut parts = vec![floors];
        if n > 0 {
            let positions: Option<Vec<usize>> = self
                .config
                .ordering_mode
                .uses_positions()
                .then(|| contexts.iter().flat_map(|c| 0..c.len()).collect());
            parts.push(self.object_tokens(g, b, &objects, positions.as_deref())?);
        }
        parts.push(g.reshape(b.var(self.ids.query), &[1, d])?);
        let pool = g.concat_rows(&parts)?;
        // Sequence per example: F, its context tokens, the query token.
        let mut order = Vec::with_capacity(2 * batch + n);
        let mut segments = Vec::with_capacity(batch);
        let mut query_rows = Vec::with_capacity(batch);
        let mut offset = batch;
        for (i, c) in contexts.iter().enumerate() {
            let start = order.len();
            order.push(i);
            order.extend(offset..offset + c.len());
            offset += c.len();
            query_rows.push(order.len());
            order.push(batch + n);
            segments.push((start, order.len() - start));
        }
        let mut x = g.gather_rows(pool, &order)?;
        for blk in &self.ids.blocks {
            let h = self.norm(g, b, x, blk.ln1)?;
            let q = self.linear(g, b, h, blk.wq)?;
            let k = self.linear(g, b, h, blk.wk)?;
            let v = self.linear(g, b, h, blk.wv)?;
            let a = g.attention(q, k, v, &segments, self.config.n_heads)?;
            x = g.add(x, self.linear(g, b, a, blk.wo)?)?;
            let h = self.norm(g, b, x, blk.ln2)?;
            let f = g.relu(self.linear(g, b, h, blk.ff1)?);
            x = g.add(x, self.linear(g, b, f, blk.ff2)?)?;
        }
        let q = g.gather_rows(x, &query_rows)?;
        self.norm(g, b, q, self.ids.final_ln)
    }

    /// Raw end-symbol-augmented category logits `[B, C + 1]`.
    pub fn category_logits(&self, g: &Graph<S>, b: &Bound, qhat: Var) -> Result<Var, ModelError> {
        self.linear(g, b, qhat, self.ids.head_category)
    }

    fn embed_categories(&self, g: &Graph<S>, b: &Bound, cats: &[usize]) -> Result<Var, ModelError> {
        Ok(g.gather_rows(b.var(self.ids.embed), cats)?)
    }

    fn encode_columns(&self, g: &Graph<S>, rows: &[Vec<f64>]) -> Result<Var, ModelError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flatten().copied().map(S::of).collect();
        let x = g.constant(Tensor::new(vec![rows.len(), cols], data)?);
        Ok(g.sinusoid(x, self.config.octaves)?)
    }

    /// Location mixture parameters `[B, 9K]` given categories.
    pub fn location_raw(&self, g: &Graph<S>, b: &Bound, qhat: Var, cats: &[usize]) -> Result<Var, ModelError> {
        let input = g.concat_cols(&[qhat, self.embed_categories(g, b, cats)?])?;
        self.mlp(g, b, input, &self.ids.head_location)
    }

    /// Orientation mixture parameters `[B, 3K]` given categories and locations.
    pub fn orientation_raw(
        &self,
        g: &Graph<S>,
        b: &Bound,
        qhat: Var,
        cats: &[usize],
        locations: &[[f64; 3]],
    ) -> Result<Var, ModelError> {
        let t: Vec<Vec<f64>> = locations.iter().map(|l| l.to_vec()).collect();
        let input = g.concat_cols(&[qhat, self.embed_categories(g, b, cats)?, self.encode_columns(g, &t)?])?;
        self.mlp(g, b, input, &self.ids.head_orientation)
    }

    /// Size mixture parameters `[B, 9K]` given categories, locations and
    /// orientations.
    pub fn size_raw(
        &self,
        g: &Graph<S>,
        b: &Bound,
        qhat: Var,
        cats: &[usize],
        locations: &[[f64; 3]],
        orientations: &[f64],
    ) -> Result<Var, ModelError> {
        let tr: Vec<Vec<f64>> = locations
            .iter()
            .zip(orientations)
            .map(|(l, &r)| vec![l[0], l[1], l[2], r])
            .collect();
        let input = g.concat_cols(&[qhat, self.embed_categories(g, b, cats)?, self.encode_columns(g, &tr)?])?;
        self.mlp(g, b, input, &self.ids.head_size)
    }

    /// Per-example NLL of each example's target. End-symbol targets score
    /// only the category term.
    pub fn batch_nll(&self, g: &Graph<S>, b: &Bound, examples: &[Example<'_>]) -> Result<BatchNll, ModelError> {
        let end = self.config.end_symbol();
        let k = self.config.components;
        let masks: Vec<&FloorMask> = examples.iter().map(|e| e.floor).collect();
        let floors = self.layout_features(g, b, &masks)?;
        let contexts: Vec<&[ObjectCode]> = examples.iter().map(|e| e.context.as_slice()).collect();
        let qhat = self.query_features(g, b, floors, &contexts)?;
        let mut labels = Vec::with_capacity(examples.len());
        for e in examples {
            match &e.target {
                Some(t) => {
                    self.check_category(t.category)?;
                    labels.push(t.category);
                }
                None => labels.push(end),
            }
        }
        let logp = g.log_softmax_rows(self.category_logits(g, b, qhat)?)?;
        let mut lp = g.pick(logp, &labels)?;
        let rows: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].target.is_some()).collect();
        if !rows.is_empty() {
            let targets: Vec<ObjectCode> = rows.iter().filter_map(|&i| examples[i].target).collect();
            let cats: Vec<usize> = targets.iter().map(|t| t.category).collect();
            let locs: Vec<[f64; 3]> = targets.iter().map(|t| t.location).collect();
            let oris: Vec<f64> = targets.iter().map(|t| t.orientation).collect();
            let n = rows.len();
            let values = |v: Vec<f64>, cols: usize| -> Result<Var, ModelError> {
                Ok(g.constant(Tensor::new(vec![n, cols], v.into_iter().map(S::of).collect())?))
            };
            let qo = g.gather_rows(qhat, &rows)?;
            let lt = mixture_log_prob(
                g,
                self.location_raw(g, b, qo, &cats)?,
                values(locs.iter().flatten().copied().collect(), 3)?,
                k,
            )?;
            let lr = mixture_log_prob(
                g,
                self.orientation_raw(g, b, qo, &cats, &locs)?,
                values(oris.clone(), 1)?,
                k,
            )?;
            let ls = mixture_log_prob(
                g,
                self.size_raw(g, b, qo, &cats, &locs, &oris)?,
                values(targets.iter().flat_map(|t| t.size).collect(), 3)?,
                k,
            )?;
            let attr = g.add(g.add(lt, lr)?, ls)?;
            // Scatter back to batch rows; end-symbol rows pick the trailing zero.
            let padded = g.concat_rows(&[g.reshape(attr, &[n, 1])?, g.constant(Tensor::zeros(&[1, 1]))])?;
            let mut pick = vec![n; examples.len()];
            for (j, &i) in rows.iter().enumerate() {
                pick[i] = j;
            }
            let scattered = g.reshape(g.gather_rows(padded, &pick)?, &[examples.len()])?;
            lp = g.add(lp, scattered)?;
        }
        let per_example = g.scale(lp, -S::one());
        Ok(BatchNll {
            per_example,
            total: g.sum(per_example),
        })
    }
}
