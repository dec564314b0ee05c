use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sizes of every sub-network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Sensor channels.
    pub n_x: usize,
    /// Operating-setting channels. Zero is allowed for input-free sequences.
    pub n_u: usize,
    pub n_z: usize,
    pub n_h: usize,
    pub hidden_recognition: usize,
    pub hidden_prior: usize,
    pub hidden_emission: usize,
    pub hidden_discriminator: usize,
    pub hidden_rul: usize,
}

impl NetworkSpec {
    /// Default sizes for the given data dimensions: latent 8, history 32,
    /// hidden layers 32.
    pub fn with_dims(n_x: usize, n_u: usize) -> Self {
        Self::sized(n_x, n_u, 8, 32, 32)
    }

    /// All hidden layers share the width `hidden`.
    pub fn sized(n_x: usize, n_u: usize, n_z: usize, n_h: usize, hidden: usize) -> Self {
        Self {
            n_x,
            n_u,
            n_z,
            n_h,
            hidden_recognition: hidden,
            hidden_prior: hidden,
            hidden_emission: hidden,
            hidden_discriminator: hidden,
            hidden_rul: hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_x", self.n_x),
            ("n_z", self.n_z),
            ("n_h", self.n_h),
            ("hidden_recognition", self.hidden_recognition),
            ("hidden_prior", self.hidden_prior),
            ("hidden_emission", self.hidden_emission),
            ("hidden_discriminator", self.hidden_discriminator),
            ("hidden_rul", self.hidden_rul),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.n_z > self.n_h {
            return Err(Error::InvalidArgument(format!("n_z ({}) must not exceed n_h ({})", self.n_z, self.n_h)));
        }
        Ok(())
    }
}

/// Which player a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Generative model: transition prior, its recurrence, and emission.
    Theta,
    /// Recognition model: history encoder and posterior head.
    Phi,
    /// Latent-sequence discriminator.
    Psi,
    /// RUL readout.
    Rho,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Theta, Group::Phi, Group::Psi, Group::Rho];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Phi => "phi",
            Group::Psi => "psi",
            Group::Rho => "rho",
        }
    }
}

/// Affine layer `y = W x + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Gated recurrent cell with stacked gate weights.
///
/// `wx: [3 n_h, in]` holds the update, reset and candidate input weights,
/// `uzr: [2 n_h, n_h]` the update/reset recurrent weights, `uh: [n_h, n_h]`
/// the candidate recurrent weight and `b: [3 n_h]` the three biases.
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub wx: ParamId,
    pub uzr: ParamId,
    pub uh: ParamId,
    pub b: ParamId,
}

/// Positions of every parameter tensor inside [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub enc: GruIds,
    pub enc_h0: ParamId,
    pub rec_hidden: LinearIds,
    pub rec_mean: LinearIds,
    pub rec_log_var: LinearIds,

    pub gen: GruIds,
    pub gen_h0: ParamId,
    pub prior_hidden: LinearIds,
    pub prior_mean: LinearIds,
    pub prior_log_var: LinearIds,
    /// Linear path `A z_{t-1}` of the transition mean.
    pub prior_skip: ParamId,
    pub emit_hidden: LinearIds,
    pub emit_mean: LinearIds,
    pub emit_log_var: LinearIds,
    /// Linear path `C z_t` of the emission mean.
    pub emit_skip: ParamId,

    pub disc_hidden: LinearIds,
    pub disc_out: LinearIds,

    pub rul_hidden: LinearIds,
    pub rul_out: LinearIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Every learnable tensor of the model, partitioned into [`Group`]s.
#[derive(Clone, Debug)]
pub struct ModelParams {
    spec: NetworkSpec,
    layout: Layout,
    entries: Vec<ParamEntry>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.entries == other.entries
    }
}

enum Init {
    Zero,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

struct Builder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, group: Group, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.entries.push(ParamEntry {
            name: format!("{}.{name}", group.prefix()),
            group,
            value: Tensor::zeros(shape),
        });
        self.inits.push(init);
        ParamId(self.entries.len() - 1)
    }

    fn linear(&mut self, group: Group, name: &str, out: usize, inp: usize) -> LinearIds {
        LinearIds {
            w: self.add(group, &format!("{name}.w"), &[out, inp], Init::FanIn(inp)),
            b: self.add(group, &format!("{name}.b"), &[out], Init::Zero),
        }
    }

    fn gru(&mut self, group: Group, name: &str, inp: usize, n_h: usize) -> GruIds {
        GruIds {
            wx: self.add(group, &format!("{name}.wx"), &[3 * n_h, inp], Init::FanIn(inp)),
            uzr: self.add(group, &format!("{name}.uzr"), &[2 * n_h, n_h], Init::FanIn(n_h)),
            uh: self.add(group, &format!("{name}.uh"), &[n_h, n_h], Init::FanIn(n_h)),
            b: self.add(group, &format!("{name}.b"), &[3 * n_h], Init::Zero),
        }
    }
}

impl ModelParams {
    fn build(spec: &NetworkSpec) -> Result<(Layout, Builder)> {
        spec.validate()?;
        let s = spec;
        let mut b = Builder { entries: Vec::new(), inits: Vec::new() };
        use Group::*;
        let layout = Layout {
            enc: b.gru(Phi, "enc", s.n_x + s.n_u + s.n_z, s.n_h),
            enc_h0: b.add(Phi, "enc.h0", &[s.n_h], Init::Zero),
            rec_hidden: b.linear(Phi, "rec.hidden", s.hidden_recognition, s.n_h),
            rec_mean: b.linear(Phi, "rec.mean", s.n_z, s.hidden_recognition),
            rec_log_var: b.linear(Phi, "rec.log_var", s.n_z, s.hidden_recognition),

            gen: b.gru(Theta, "gen", s.n_z + s.n_x + s.n_u, s.n_h),
            gen_h0: b.add(Theta, "gen.h0", &[s.n_h], Init::Zero),
            prior_hidden: b.linear(Theta, "prior.hidden", s.hidden_prior, s.n_z + s.n_h),
            prior_mean: b.linear(Theta, "prior.mean", s.n_z, s.hidden_prior),
            prior_log_var: b.linear(Theta, "prior.log_var", s.n_z, s.hidden_prior),
            prior_skip: b.add(Theta, "prior.skip", &[s.n_z, s.n_z], Init::Zero),
            emit_hidden: b.linear(Theta, "emit.hidden", s.hidden_emission, s.n_z + s.n_h),
            emit_mean: b.linear(Theta, "emit.mean", s.n_x, s.hidden_emission),
            emit_log_var: b.linear(Theta, "emit.log_var", s.n_x, s.hidden_emission),
            emit_skip: b.add(Theta, "emit.skip", &[s.n_x, s.n_z], Init::FanIn(s.n_z)),

            disc_hidden: b.linear(Psi, "disc.hidden", s.hidden_discriminator, s.n_z),
            disc_out: b.linear(Psi, "disc.out", 1, s.hidden_discriminator),

            rul_hidden: b.linear(Rho, "rul.hidden", s.hidden_rul, s.n_h + s.n_z),
            rul_out: b.linear(Rho, "rul.out", 1, s.hidden_rul),
        };
        Ok((layout, b))
    }

    /// Randomly initialized parameters: weights uniform in `±1/sqrt(fan_in)`,
    /// biases and initial states zero.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let (layout, mut b) = Self::build(spec)?;
        for (entry, init) in b.entries.iter_mut().zip(&b.inits) {
            if let Init::FanIn(fan_in) = init {
                let bound = 1.0 / (*fan_in as f64).sqrt();
                for v in entry.value.data_mut() {
                    *v = rng.uniform_range(-bound, bound);
                }
            }
        }
        Ok(Self { spec: spec.clone(), layout, entries: b.entries })
    }

    /// Every parameter set to zero.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let (layout, b) = Self::build(spec)?;
        Ok(Self { spec: spec.clone(), layout, entries: b.entries })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.group(id) == group)
    }

    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        self.entries[id.0].value.set_data(data)
    }

    pub fn set_by_name(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        self.set(id, data)
    }

    pub fn count(&self, group: Group) -> usize {
        self.ids_in(group).map(|id| self.get(id).len()).sum()
    }

    /// Order-sensitive 64-bit digest of one partition, used to prove that a
    /// phase left the other partitions untouched.
    pub fn fingerprint(&self, group: Group) -> u64 {
        let mut h = crate::training::Fnv64::new();
        for id in self.ids_in(group) {
            h.write(self.name(id).as_bytes());
            for v in self.get(id).data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Configures the generative partition as a linear-Gaussian state-space
    /// model: transition mean `A z_{t-1}` with variances `q`, emission mean
    /// `C z_t` with variances `r`. The first latent keeps its standard-normal
    /// prior. Only `Theta` is modified.
    pub fn set_linear_gaussian(&mut self, a: &[f64], c: &[f64], q: &[f64], r: &[f64]) -> Result<()> {
        let (n_z, n_x) = (self.spec.n_z, self.spec.n_x);
        if a.len() != n_z * n_z || c.len() != n_x * n_z || q.len() != n_z || r.len() != n_x {
            return Err(Error::SpecMismatch("linear-Gaussian dimensions do not match the network".into()));
        }
        let raw = |v: f64| -> Result<f64> {
            let lv = v.ln();
            if !(lv.abs() < super::LOG_VAR_BOUND) {
                return Err(Error::InvalidArgument(format!("variance {v} outside the representable range")));
            }
            Ok(super::LOG_VAR_BOUND * (lv / super::LOG_VAR_BOUND).atanh())
        };
        let l = self.layout.clone();
        for id in self.ids_in(Group::Theta).collect::<Vec<_>>() {
            let n = self.get(id).len();
            self.set(id, &vec![0.0; n])?;
        }
        self.set(l.prior_skip, a)?;
        self.set(l.emit_skip, c)?;
        self.set(l.prior_log_var.b, &q.iter().map(|&v| raw(v)).collect::<Result<Vec<_>>>()?)?;
        self.set(l.emit_log_var.b, &r.iter().map(|&v| raw(v)).collect::<Result<Vec<_>>>()?)?;
        Ok(())
    }
}
