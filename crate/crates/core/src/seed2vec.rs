//! Variational autoencoder over seed vectors.
//!
//! The encoder maps a length-`|V|` seed vector through a tanh MLP to the mean
//! and log-variance of a diagonal Gaussian posterior; the decoder maps a
//! latent vector back through a tanh MLP with a sigmoid output. Training
//! minimises per-sample squared reconstruction error plus a weighted KL
//! divergence to a fixed diagonal Gaussian prior.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, Adam, ParamStore, Tape, Tensor, Var};
use crate::error::{RemError, Result};
use crate::graph::SeedVector;
use crate::rng;

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub num_nodes: usize,
    pub hidden: usize,
    pub latent: usize,
    pub kl_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub prior_mean: f64,
    pub prior_var: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            num_nodes: 0,
            hidden: 128,
            latent: 32,
            kl_weight: 0.55,
            lr: 3e-3,
            batch_size: 256,
            epochs: 300,
            prior_mean: 0.0,
            prior_var: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn for_nodes(num_nodes: usize) -> Self {
        VaeConfig {
            num_nodes,
            ..VaeConfig::default()
        }
    }
}

// parameter order inside the store
const ENC_W1: usize = 0;
const ENC_B1: usize = 1;
const ENC_WMU: usize = 2;
const ENC_BMU: usize = 3;
const ENC_WLV: usize = 4;
const ENC_BLV: usize = 5;
const DEC_W1: usize = 6;
const DEC_B1: usize = 7;
const DEC_W2: usize = 8;
const DEC_B2: usize = 9;

/// Loss of one evaluation, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Tape handles of the three loss terms.
pub struct ElboVars<'t> {
    pub loss: Var<'t>,
    pub mse: Var<'t>,
    pub kl: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seed2Vec {
    pub cfg: VaeConfig,
    params: ParamStore,
}

impl Seed2Vec {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        if cfg.num_nodes == 0 || cfg.hidden == 0 || cfg.latent == 0 {
            return Err(RemError::Config("VAE dimensions must be positive".into()));
        }
        if cfg.prior_var <= 0.0 {
            return Err(RemError::Config("prior variance must be positive".into()));
        }
        let mut r = rng::stream(seed, "vae-init");
        let (n, h, s) = (cfg.num_nodes, cfg.hidden, cfg.latent);
        let mut p = ParamStore::new();
        p.add("enc.w1", Tensor::glorot(n, h, &mut r));
        p.add("enc.b1", Tensor::zeros(&[1, h]));
        p.add("enc.w_mu", Tensor::glorot(h, s, &mut r));
        p.add("enc.b_mu", Tensor::zeros(&[1, s]));
        p.add("enc.w_lv", Tensor::glorot(h, s, &mut r));
        p.add("enc.b_lv", Tensor::zeros(&[1, s]));
        p.add("dec.w1", Tensor::glorot(s, h, &mut r));
        p.add("dec.b1", Tensor::zeros(&[1, h]));
        p.add("dec.w2", Tensor::glorot(h, n, &mut r));
        p.add("dec.b2", Tensor::zeros(&[1, n]));
        Ok(Seed2Vec { cfg, params: p })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.cfg.num_nodes
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent
    }

    /// Posterior mean and clamped log-variance for a `B x |V|` batch.
    pub fn encode_var<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = x.matmul(p[ENC_W1])?.add(p[ENC_B1])?.tanh();
        let mu = h.matmul(p[ENC_WMU])?.add(p[ENC_BMU])?;
        let lv = h
            .matmul(p[ENC_WLV])?
            .add(p[ENC_BLV])?
            .clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, lv))
    }

    /// Decoded probabilities for a `B x s` batch of latent vectors.
    pub fn decode_var<'t>(&self, p: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        let h = z.matmul(p[DEC_W1])?.add(p[DEC_B1])?.tanh();
        Ok(h.matmul(p[DEC_W2])?.add(p[DEC_B2])?.sigmoid())
    }

    /// Batch-averaged loss with fixed reparameterization noise `eps`.
    pub fn elbo_var<'t>(&self, p: &[Var<'t>], x: Var<'t>, eps: Var<'t>) -> Result<ElboVars<'t>> {
        let batch = x.value().rows() as f64;
        let (mu, lv) = self.encode_var(p, x)?;
        let z = reparameterize_var(mu, lv, eps)?;
        let xhat = self.decode_var(p, z)?;
        let mse = xhat.sub(x)?.square().sum().scale(1.0 / batch);
        let kl = kl_to_prior_var(mu, lv, self.cfg.prior_mean, self.cfg.prior_var)?.scale(1.0 / batch);
        let loss = mse.add(kl.scale(self.cfg.kl_weight))?;
        Ok(ElboVars { loss, mse, kl })
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.cfg.num_nodes {
            return Err(RemError::Contract(format!(
                "{what} has length {n}, the model expects {}",
                self.cfg.num_nodes
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(x.len(), "seed vector")?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let (mu, lv) = self.encode_var(&p, xv)?;
        let (mu, lv) = (mu.to_tensor().into_data(), lv.to_tensor().into_data());
        Ok((mu, lv))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.latent {
            return Err(RemError::Contract(format!(
                "latent vector has length {}, the model expects {}",
                z.len(),
                self.cfg.latent
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let zv = tape.constant(Tensor::row(z.to_vec()));
        Ok(self.decode_var(&p, zv)?.to_tensor().into_data())
    }

    /// Decode of the posterior mean.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    pub fn elbo_loss(&self, x: &[f64], eps: &[f64]) -> Result<ElboParts> {
        self.check_len(x.len(), "seed vector")?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let ev = tape.constant(Tensor::row(eps.to_vec()));
        let e = self.elbo_var(&p, xv, ev)?;
        Ok(ElboParts {
            loss: e.loss.item(),
            mse: e.mse.item(),
            kl: e.kl.item(),
        })
    }

    /// Draw from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sd = self.cfg.prior_var.sqrt();
        Tensor::randn(&[self.cfg.latent], 1.0, rng)
            .into_data()
            .into_iter()
            .map(|e| self.cfg.prior_mean + sd * e)
            .collect()
    }

    /// Minibatch Adam on `data`; returns the mean epoch loss per epoch.
    pub fn train(&mut self, data: &[SeedVector], epochs: usize, seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(RemError::Contract("VAE training set is empty".into()));
        }
        for x in data {
            self.check_len(x.len(), "training sample")?;
        }
        let mut opt = Adam::new(self.cfg.lr);
        let mut r: ChaCha8Rng = rng::stream(seed, "vae-train");
        let mut order: Vec<usize> = (0..data.len()).collect();
        let bs = self.cfg.batch_size.max(1);
        let mut curve = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            for chunk in order.chunks(bs) {
                let rows: Vec<&[f64]> = chunk.iter().map(|&i| data[i].values()).collect();
                let xb = Tensor::stack_rows(&rows)?;
                let eps = Tensor::randn(&[chunk.len(), self.cfg.latent], 1.0, &mut r);
                let tape = Tape::new();
                let p = self.params.bind(&tape);
                let xv = tape.constant(xb);
                let ev = tape.constant(eps);
                let e = self.elbo_var(&p, xv, ev)?;
                let loss = e.loss.item();
                if !loss.is_finite() {
                    return Err(RemError::NonFinite(format!("VAE loss at epoch {epoch}")));
                }
                total += loss * chunk.len() as f64;
                let g = tape.backward(e.loss)?;
                let grads: Vec<Option<Tensor>> = p.iter().map(|&v| g.wrt(v).cloned()).collect();
                opt.step(&mut self.params, &grads);
            }
            curve.push(total / data.len() as f64);
            log::debug!("vae epoch {epoch}: loss {}", curve[epoch]);
        }
        Ok(curve)
    }

    /// Mean absolute per-entry reconstruction error through the posterior mean.
    pub fn reconstruction_error(&self, data: &[SeedVector]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for x in data {
            let xhat = self.reconstruct(x.values())?;
            total += xhat.iter().zip(x.values()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += x.len();
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "model": "seed2vec", "config": self.cfg });
        write_checkpoint(path, &meta, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("seed2vec") {
            return Err(RemError::Checkpoint("not a seed2vec checkpoint".into()));
        }
        let cfg: VaeConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut m = Seed2Vec::new(cfg, 0)?;
        m.params.load_from(&ck.params)?;
        Ok(m)
    }
}

/// `z = mu + exp(lv / 2) * eps`.
pub fn reparameterize_var<'t>(mu: Var<'t>, lv: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    mu.add(lv.scale(0.5).exp().mul(eps)?)
}

pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, l), e)| m + (0.5 * l.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp() * e)
        .collect()
}

/// Closed-form `KL(N(mu, exp(lv)) || N(m0, v0))` summed over all entries.
pub fn kl_to_prior_var<'t>(mu: Var<'t>, lv: Var<'t>, m0: f64, v0: f64) -> Result<Var<'t>> {
    let dm = mu.shift(-m0).square();
    let ratio = lv.exp().add(dm)?.scale(1.0 / v0);
    Ok(ratio.sub(lv)?.shift(v0.ln() - 1.0).scale(0.5).sum())
}

pub fn kl_to_prior(mu: &[f64], logvar: &[f64], m0: f64, v0: f64) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, l)| 0.5 * (v0.ln() - l + (l.exp() + (m - m0) * (m - m0)) / v0 - 1.0))
        .sum()
}

/// Entropy of `x` normalised to a distribution over nodes, `0 log 0 = 0`.
pub fn entropy(x: &[f64]) -> f64 {
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    x.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum()
}

/// Per-row entropy of a strictly positive `B x |V|` batch, as a `B x 1` column.
pub fn entropy_var(x: Var<'_>) -> Result<Var<'_>> {
    let p = x.div(x.sum_axis(1)?)?;
    Ok(p.mul(p.log())?.sum_axis(1)?.neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn tiny(seed: u64) -> Seed2Vec {
        Seed2Vec::new(
            VaeConfig {
                num_nodes: 6,
                hidden: 5,
                latent: 3,
                ..VaeConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn zeroed(m: &mut Seed2Vec) {
        for t in m.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_expose_biases() {
        let mut m = tiny(1);
        zeroed(&mut m);
        m.params_mut().tensors_mut()[ENC_BMU] = Tensor::row(vec![0.3, -0.2, 1.0]);
        m.params_mut().tensors_mut()[DEC_B2] = Tensor::row(vec![0.0, 1.0, -1.0, 2.0, 0.5, -0.5]);
        let (mu, lv) = m.encode(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mu, vec![0.3, -0.2, 1.0]);
        assert_eq!(lv, vec![0.0; 3]);
        let xhat = m.decode(&[0.7, -3.0, 2.0]).unwrap();
        for (o, b) in xhat.iter().zip([0.0f64, 1.0, -1.0, 2.0, 0.5, -0.5]) {
            assert!((o - 1.0 / (1.0 + (-b).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_is_pure_and_separates_one_hots() {
        let m = Seed2Vec::new(VaeConfig::for_nodes(60), 4).unwrap();
        let x: Vec<f64> = (0..60).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        let mut r = rng::stream(8, "pairs");
        for _ in 0..50 {
            let a = r.random_range(0..60);
            let b = (a + r.random_range(1..60)) % 60;
            let ea = m.encode(SeedVector::from_nodes(60, &[a]).unwrap().values()).unwrap().0;
            let eb = m.encode(SeedVector::from_nodes(60, &[b]).unwrap().values()).unwrap().0;
            assert_ne!(ea, eb);
        }
    }

    #[test]
    fn reparameterize_cases() {
        assert_eq!(reparameterize(&[1.0, -2.0], &[0.3, 5.0], &[0.0, 0.0]), vec![1.0, -2.0]);
        // clamped at -10: exp(-5) standard deviation
        let z = reparameterize(&[0.0], &[-1e9], &[1.0]);
        assert!((z[0] - (-5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_gradient() {
        let eps = Tensor::row(vec![0.4, -1.2, 0.9]);
        let lv = Tensor::row(vec![0.1, -0.5, 0.7]);
        let err = grad_check(
            |t, mu| {
                let z = reparameterize_var(mu, t.constant(lv.clone()), t.constant(eps.clone()))?;
                Ok(z.square().sum())
            },
            &Tensor::row(vec![0.3, -0.8, 1.5]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_to_prior(&[0.0; 4], &[0.0; 4], 0.0, 1.0), 0.0);
        assert!((kl_to_prior(&[1.0, 1.0], &[0.0, 0.0], 0.0, 1.0) - 1.0).abs() < 1e-15);
        let tape = Tape::new();
        let mu = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let lv = tape.constant(Tensor::row(vec![0.0, 0.0]));
        assert!((kl_to_prior_var(mu, lv, 0.0, 1.0).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_reconstruction_at_prior_is_zero_loss() {
        // decoder saturated towards x and encoder output equal to the prior
        let mut m = tiny(2);
        zeroed(&mut m);
        let x = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        m.params_mut().tensors_mut()[DEC_B2] =
            Tensor::row(x.iter().map(|&v| if v == 1.0 { 60.0 } else { -60.0 }).collect());
        let e = m.elbo_loss(&x, &[0.3, -0.1, 2.0]).unwrap();
        assert!(e.kl.abs() < 1e-15);
        assert!(e.loss < 1e-20);
    }

    #[test]
    fn elbo_gradient_check() {
        let m = tiny(5);
        let x = Tensor::row(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let eps = Tensor::row(vec![0.2, -0.7, 1.1]);
        for which in 0..10 {
            let base = m.params().tensors()[which].clone();
            let err = grad_check(
                |t, w| {
                    let mut p = m.params().bind_frozen(t);
                    p[which] = w;
                    let e = m.elbo_var(&p, t.constant(x.clone()), t.constant(eps.clone()))?;
                    Ok(e.loss)
                },
                &base,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "param {which}: {err}");
        }
    }

    #[test]
    fn entropy_properties() {
        assert!((entropy(&[1.0, 1.0, 0.0, 1.0]) - 3f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 0.0]), 0.0);
        let uniform = entropy(&[0.4; 5]);
        for x in [[0.9, 0.1, 0.4, 0.4, 0.2], [0.5, 0.5, 0.5, 0.5, 0.01]] {
            assert!(uniform >= entropy(&x));
        }
        let tape = Tape::new();
        let v = tape.constant(Tensor::matrix(2, 3, vec![0.2, 0.2, 0.2, 0.9, 0.05, 0.05]).unwrap());
        let h = entropy_var(v).unwrap().to_tensor();
        assert!((h.data()[0] - 3f64.ln()).abs() < 1e-12);
        assert!((h.data()[1] - entropy(&[0.9, 0.05, 0.05])).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_checkpoints() {
        let mut r = rng::stream(3, "corpus");
        let data = crate::synth::block_corpus(20, 4, 2, 40, &mut r);
        let mut m = Seed2Vec::new(
            VaeConfig {
                num_nodes: 20,
                hidden: 32,
                latent: 8,
                ..VaeConfig::default()
            },
            7,
        )
        .unwrap();
        let curve = m.train(&data, 150, 1).unwrap();
        assert!(curve.last().unwrap() < &(curve[0] * 0.5), "{curve:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        m.save(&path).unwrap();
        let back = Seed2Vec::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn training_is_deterministic() {
        let mut r = rng::stream(3, "corpus");
        let data = crate::synth::block_corpus(12, 3, 1, 10, &mut r);
        let cfg = VaeConfig {
            num_nodes: 12,
            hidden: 8,
            latent: 2,
            ..VaeConfig::default()
        };
        let mut a = Seed2Vec::new(cfg.clone(), 1).unwrap();
        let mut b = Seed2Vec::new(cfg, 1).unwrap();
        a.train(&data, 5, 9).unwrap();
        b.train(&data, 5, 9).unwrap();
        assert_eq!(a, b);
    }
}
