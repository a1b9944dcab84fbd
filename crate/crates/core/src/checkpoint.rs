//! Versioned JSON checkpoints for velocity fields and interpolants.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{VectorField, VelocityField};
use crate::interpolant::LearnableInterpolant;
use crate::nn::{AdamState, MlpParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Velocity,
    Interpolant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub role: Role,
    pub dim: usize,
    /// Whether an interpolant network takes `t`; absent for velocity fields.
    pub time_input: Option<bool>,
    /// Condition index for per-condition models.
    pub condition: Option<usize>,
    pub seed: u64,
    pub iteration: usize,
    pub net: MlpParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn velocity(field: &VelocityField, optimizer: Option<&AdamState>, seed: u64, iteration: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role: Role::Velocity,
            dim: field.dim(),
            time_input: None,
            condition: None,
            seed,
            iteration,
            net: field.net().clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn interpolant(
        interp: &LearnableInterpolant,
        optimizer: Option<&AdamState>,
        seed: u64,
        iteration: usize,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role: Role::Interpolant,
            dim: interp.dim(),
            time_input: Some(interp.time_input()),
            condition: None,
            seed,
            iteration,
            net: interp.net().clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn with_condition(mut self, q: usize) -> Self {
        self.condition = Some(q);
        self
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(r)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let net = MlpParams::from_layers(self.net.weights().to_vec(), self.net.biases().to_vec())?;
        let expected_in = match (self.role, self.time_input) {
            (Role::Velocity, None) => self.dim + 1,
            (Role::Interpolant, Some(t)) => 2 * self.dim + usize::from(t),
            (role, t) => {
                return Err(Error::Schema(format!("role {role:?} with time_input {t:?}")));
            }
        };
        if net.input_dim() != expected_in || net.output_dim() != self.dim {
            return Err(Error::Schema(format!(
                "network {:?} does not fit a {:?} of dimension {}",
                net.dims(),
                self.role,
                self.dim
            )));
        }
        if let Some(opt) = &self.optimizer {
            AdamState::new(&net, opt.config).check_layout(opt)?;
        }
        Ok(())
    }

    pub fn into_velocity(self) -> Result<VelocityField> {
        if self.role != Role::Velocity {
            return Err(Error::Schema("checkpoint holds an interpolant, not a velocity field".into()));
        }
        VelocityField::from_net(self.net)
    }

    pub fn into_interpolant(self) -> Result<LearnableInterpolant> {
        match (self.role, self.time_input) {
            (Role::Interpolant, Some(t)) => LearnableInterpolant::from_net(self.net, self.dim, t),
            _ => Err(Error::Schema("checkpoint holds a velocity field, not an interpolant".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_round_trip_is_bit_exact() {
        let field = VelocityField::new(2, &[8, 8], 3).unwrap();
        let opt = AdamState::new(field.net(), Default::default());
        let ck = Checkpoint::velocity(&field, Some(&opt), 3, 17);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(back.net.flat()), bits(field.net().flat()));
        assert_eq!(back.into_velocity().unwrap().net(), field.net());
    }

    #[test]
    fn interpolant_round_trip() {
        let interp = LearnableInterpolant::new(3, &[4], 1, true, 0.1).unwrap();
        let ck = Checkpoint::interpolant(&interp, None, 1, 5).with_condition(1);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back.condition, Some(1));
        let restored = back.into_interpolant().unwrap();
        assert!(restored.time_input());
        assert_eq!(restored.net(), interp.net());
    }

    #[test]
    fn rejects_bad_version_and_role() {
        let field = VelocityField::new(2, &[4], 0).unwrap();
        let mut ck = Checkpoint::velocity(&field, None, 0, 0);
        ck.version = 99;
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(Error::Schema(_))));
        let ck = Checkpoint::velocity(&field, None, 0, 0);
        assert!(ck.into_interpolant().is_err());
    }
}
