use serde::{Deserialize, Serialize};

use crate::numeric::{Activation, Affine, Matrix, Mlp, SeededRng};
use crate::Result;

use super::NsaConfig;

/// The three remapping branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Compression = 0,
    Selection = 1,
    Window = 2,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Compression, Branch::Selection, Branch::Window];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Compression => "cmp",
            Branch::Selection => "slc",
            Branch::Window => "win",
        }
    }
}

/// Key/value projection pair for one branch of one KV group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvProjection {
    pub key: Affine,
    pub value: Affine,
}

impl KvProjection {
    fn init(cfg: &NsaConfig, d_in: usize, rng: &mut SeededRng) -> Self {
        KvProjection {
            key: Affine::init(cfg.d_k, d_in, rng),
            value: Affine::init(cfg.d_v, d_in, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        KvProjection { key: self.key.zeros_like(), value: self.value.zeros_like() }
    }

    fn add_scaled(&mut self, other: &Self, s: f64) {
        self.key.add_scaled(&other.key, s);
        self.value.add_scaled(&other.value, s);
    }

    fn param_count(&self) -> usize {
        self.key.param_count() + self.value.param_count()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        self.key.write_flat(out);
        self.value.write_flat(out);
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.key.read_flat(src, pos);
        self.value.read_flat(src, pos);
    }
}

/// Named parameter groups, the granularity at which gradients are
/// verified against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    PhiK,
    PhiV,
    Positional,
    ProjCmp,
    ProjSlc,
    ProjWin,
    Gate,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::PhiK,
        ParamGroup::PhiV,
        ParamGroup::Positional,
        ParamGroup::ProjCmp,
        ParamGroup::ProjSlc,
        ParamGroup::ProjWin,
        ParamGroup::Gate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PhiK => "phi_k",
            ParamGroup::PhiV => "phi_v",
            ParamGroup::Positional => "pos",
            ParamGroup::ProjCmp => "proj_cmp",
            ParamGroup::ProjSlc => "proj_slc",
            ParamGroup::ProjWin => "proj_win",
            ParamGroup::Gate => "gate",
        }
    }
}

/// All learnable parameters of the operator. Also doubles as the gradient
/// container (same shapes, gradient values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsaParams {
    pub d_in: usize,
    /// proj[group][branch]
    pub proj: Vec<[KvProjection; 3]>,
    /// Compression MLP for keys: flattened block (l * d_k) -> d_k.
    pub phi_k: Mlp,
    /// Compression MLP for values: flattened block (l * d_v) -> d_v.
    pub phi_v: Mlp,
    /// Intra-block positional rows added to key blocks, l x d_k.
    pub pos_k: Matrix,
    /// Intra-block positional rows added to value blocks, l x d_v.
    pub pos_v: Matrix,
    /// Gate head: input features -> 3 sigmoid gates (cmp, slc, win).
    pub gate: Mlp,
}

impl NsaParams {
    /// Seeded initialization; weights uniform in +-1/sqrt(fan_in).
    pub fn init(cfg: &NsaConfig, d_in: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.block_len;
        let proj = (0..cfg.n_groups)
            .map(|_| {
                [
                    KvProjection::init(cfg, d_in, rng),
                    KvProjection::init(cfg, d_in, rng),
                    KvProjection::init(cfg, d_in, rng),
                ]
            })
            .collect();
        let phi_k = Mlp::init_two_layer(l * cfg.d_k, 2 * l * cfg.d_k, cfg.d_k, Activation::Identity, rng);
        let phi_v = Mlp::init_two_layer(l * cfg.d_v, 2 * l * cfg.d_v, cfg.d_v, Activation::Identity, rng);
        let pos_k = rng.init_matrix(l, cfg.d_k, cfg.d_k);
        let pos_v = rng.init_matrix(l, cfg.d_v, cfg.d_v);
        let gate_hidden = (2 * d_in).max(4);
        let gate = Mlp::init_two_layer(d_in, gate_hidden, 3, Activation::Sigmoid, rng);
        Ok(NsaParams { d_in, proj, phi_k, phi_v, pos_k, pos_v, gate })
    }

    pub fn zeros_like(&self) -> Self {
        NsaParams {
            d_in: self.d_in,
            proj: self
                .proj
                .iter()
                .map(|g| [g[0].zeros_like(), g[1].zeros_like(), g[2].zeros_like()])
                .collect(),
            phi_k: self.phi_k.zeros_like(),
            phi_v: self.phi_v.zeros_like(),
            pos_k: Matrix::zeros(self.pos_k.rows(), self.pos_k.cols()),
            pos_v: Matrix::zeros(self.pos_v.rows(), self.pos_v.cols()),
            gate: self.gate.zeros_like(),
        }
    }

    /// self += s * other, elementwise over every parameter. Used both for
    /// gradient accumulation and SGD updates.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.proj.iter_mut().zip(&other.proj) {
            for i in 0..3 {
                a[i].add_scaled(&b[i], s);
            }
        }
        self.phi_k.add_scaled(&other.phi_k, s);
        self.phi_v.add_scaled(&other.phi_v, s);
        for (a, &b) in self.pos_k.data_mut().iter_mut().zip(other.pos_k.data()) {
            *a += s * b;
        }
        for (a, &b) in self.pos_v.data_mut().iter_mut().zip(other.pos_v.data()) {
            *a += s * b;
        }
        self.gate.add_scaled(&other.gate, s);
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::PhiK => self.phi_k.param_count(),
            ParamGroup::PhiV => self.phi_v.param_count(),
            ParamGroup::Positional => self.pos_k.data().len() + self.pos_v.data().len(),
            ParamGroup::ProjCmp | ParamGroup::ProjSlc | ParamGroup::ProjWin => {
                let b = self.branch_of(group);
                self.proj.iter().map(|g| g[b].param_count()).sum()
            }
            ParamGroup::Gate => self.gate.param_count(),
        }
    }

    fn branch_of(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::ProjCmp => 0,
            ParamGroup::ProjSlc => 1,
            ParamGroup::ProjWin => 2,
            _ => unreachable!("not a projection group"),
        }
    }

    pub fn group_flat(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.group_param_count(group));
        match group {
            ParamGroup::PhiK => self.phi_k.write_flat(&mut out),
            ParamGroup::PhiV => self.phi_v.write_flat(&mut out),
            ParamGroup::Positional => {
                out.extend_from_slice(self.pos_k.data());
                out.extend_from_slice(self.pos_v.data());
            }
            ParamGroup::ProjCmp | ParamGroup::ProjSlc | ParamGroup::ProjWin => {
                let b = self.branch_of(group);
                for g in &self.proj {
                    g[b].write_flat(&mut out);
                }
            }
            ParamGroup::Gate => self.gate.write_flat(&mut out),
        }
        out
    }

    pub fn set_group_flat(&mut self, group: ParamGroup, values: &[f64]) {
        let mut pos = 0;
        match group {
            ParamGroup::PhiK => self.phi_k.read_flat(values, &mut pos),
            ParamGroup::PhiV => self.phi_v.read_flat(values, &mut pos),
            ParamGroup::Positional => {
                let nk = self.pos_k.data().len();
                self.pos_k.data_mut().copy_from_slice(&values[..nk]);
                self.pos_v.data_mut().copy_from_slice(&values[nk..]);
                pos = values.len();
            }
            ParamGroup::ProjCmp | ParamGroup::ProjSlc | ParamGroup::ProjWin => {
                let b = self.branch_of(group);
                for g in &mut self.proj {
                    g[b].read_flat(values, &mut pos);
                }
            }
            ParamGroup::Gate => self.gate.read_flat(values, &mut pos),
        }
        assert_eq!(pos, values.len(), "group flat length mismatch");
    }

    /// (name, values) pairs for every parameter group, in a fixed order.
    pub fn named_groups(&self) -> Vec<(&'static str, Vec<f64>)> {
        ParamGroup::ALL
            .iter()
            .map(|&g| (g.name(), self.group_flat(g)))
            .collect()
    }

    pub fn set_named_groups(&mut self, groups: &[(String, Vec<f64>)]) -> Result<()> {
        for g in ParamGroup::ALL {
            let found = groups
                .iter()
                .find(|(name, _)| name == g.name())
                .ok_or_else(|| crate::Error::Parse(format!("missing tensor {}", g.name())))?;
            if found.1.len() != self.group_param_count(g) {
                return Err(crate::Error::Shape(format!(
                    "tensor {} has {} values, expected {}",
                    g.name(),
                    found.1.len(),
                    self.group_param_count(g)
                )));
            }
            self.set_group_flat(g, &found.1);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = NsaConfig::toy();
        let a = NsaParams::init(&cfg, 4, &mut SeededRng::new(42)).unwrap();
        let b = NsaParams::init(&cfg, 4, &mut SeededRng::new(42)).unwrap();
        assert_eq!(a, b);
        let c = NsaParams::init(&cfg, 4, &mut SeededRng::new(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn group_flat_round_trip() {
        let cfg = NsaConfig::toy();
        let params = NsaParams::init(&cfg, 4, &mut SeededRng::new(1)).unwrap();
        let mut copy = params.zeros_like();
        for g in ParamGroup::ALL {
            let flat = params.group_flat(g);
            assert_eq!(flat.len(), params.group_param_count(g));
            copy.set_group_flat(g, &flat);
        }
        assert_eq!(params, copy);
    }

    #[test]
    fn positional_table_has_block_len_rows() {
        let cfg = NsaConfig::toy();
        let params = NsaParams::init(&cfg, 4, &mut SeededRng::new(1)).unwrap();
        assert_eq!(params.pos_k.rows(), cfg.block_len);
        assert_eq!(params.pos_v.rows(), cfg.block_len);
    }
}
