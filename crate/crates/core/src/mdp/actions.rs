//! The 5×5 treatment grid: zero dose is bin 0, nonzero doses fall into four
//! quartile bins per channel.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::MdpError;
use crate::cohort::PatientTrajectory;
use crate::quantile::percentile_sorted;

pub const BINS_PER_CHANNEL: usize = 5;
pub const N_ACTIONS: usize = BINS_PER_CHANNEL * BINS_PER_CHANNEL;

/// Index into the 25-cell grid: `fluid_bin × 5 + vaso_bin`.
pub type ActionId = u8;

pub fn action_id(fluid_bin: u8, vaso_bin: u8) -> ActionId {
    debug_assert!(
        (fluid_bin as usize) < BINS_PER_CHANNEL && (vaso_bin as usize) < BINS_PER_CHANNEL
    );
    fluid_bin * BINS_PER_CHANNEL as u8 + vaso_bin
}

/// `(fluid_bin, vaso_bin)`.
pub fn split_action(a: ActionId) -> (u8, u8) {
    (a / BINS_PER_CHANNEL as u8, a % BINS_PER_CHANNEL as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Fluid,
    Vaso,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Fluid => "fluid",
            Channel::Vaso => "vasopressor",
        })
    }
}

/// Direction of a treatment change relative to the current dose bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseChange {
    Increase,
    Decrease,
    NoChange,
}

impl fmt::Display for DoseChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DoseChange::Increase => "increase",
            DoseChange::Decrease => "decrease",
            DoseChange::NoChange => "no change",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    /// Upper (inclusive) bounds of fluid bins 1–3, mL per 4 h.
    pub fluid_edges: [f64; 3],
    /// Upper (inclusive) bounds of vasopressor bins 1–3, mcg/kg/min.
    pub vaso_edges: [f64; 3],
    /// Dose rendered for the top fluid bin (90th percentile of its doses).
    pub fluid_top_dose: f64,
    /// Dose rendered for the top vasopressor bin.
    pub vaso_top_dose: f64,
}

impl ActionSpace {
    pub fn new(
        fluid_edges: [f64; 3],
        vaso_edges: [f64; 3],
        fluid_top_dose: f64,
        vaso_top_dose: f64,
    ) -> Result<Self, MdpError> {
        check_edges(Channel::Fluid, &fluid_edges)?;
        check_edges(Channel::Vaso, &vaso_edges)?;
        Ok(Self {
            fluid_edges,
            vaso_edges,
            fluid_top_dose,
            vaso_top_dose,
        })
    }

    pub fn edges(&self, channel: Channel) -> &[f64; 3] {
        match channel {
            Channel::Fluid => &self.fluid_edges,
            Channel::Vaso => &self.vaso_edges,
        }
    }

    /// Bin 0 iff the dose is zero, otherwise 1–4 by right-inclusive edges.
    pub fn bin(&self, channel: Channel, dose: f64) -> u8 {
        if dose <= 0.0 {
            return 0;
        }
        let e = self.edges(channel);
        1 + e.iter().take_while(|&&edge| dose > edge).count() as u8
    }

    pub fn discretize_action(&self, fluid_dose: f64, vaso_dose: f64) -> ActionId {
        action_id(
            self.bin(Channel::Fluid, fluid_dose),
            self.bin(Channel::Vaso, vaso_dose),
        )
    }

    /// Concrete dose shown for a bin: 0, the interval midpoint for bins 1–3,
    /// and the top-bin 90th percentile for bin 4.
    pub fn representative_dose(&self, channel: Channel, bin: u8) -> f64 {
        let e = self.edges(channel);
        match bin {
            0 => 0.0,
            1 => e[0] / 2.0,
            2 => (e[0] + e[1]) / 2.0,
            3 => (e[1] + e[2]) / 2.0,
            _ => match channel {
                Channel::Fluid => self.fluid_top_dose,
                Channel::Vaso => self.vaso_top_dose,
            },
        }
    }

    pub fn recommended_delta(
        &self,
        channel: Channel,
        current_dose: f64,
        recommended_bin: u8,
    ) -> DoseChange {
        let current = self.bin(channel, current_dose);
        match recommended_bin.cmp(&current) {
            std::cmp::Ordering::Greater => DoseChange::Increase,
            std::cmp::Ordering::Less => DoseChange::Decrease,
            std::cmp::Ordering::Equal => DoseChange::NoChange,
        }
    }
}

fn check_edges(channel: Channel, e: &[f64; 3]) -> Result<(), MdpError> {
    let ok = e.iter().all(|&x| x > 0.0 && x.is_finite()) && e[0] < e[1] && e[1] < e[2];
    if ok {
        Ok(())
    } else {
        Err(MdpError::DegenerateQuantiles { channel, edges: *e })
    }
}

fn channel_space(channel: Channel, mut doses: Vec<f64>) -> Result<([f64; 3], f64), MdpError> {
    if doses.is_empty() {
        return Err(MdpError::ZeroChannel(channel));
    }
    doses.sort_by(|a, b| a.partial_cmp(b).expect("finite doses"));
    let edges = [0.25, 0.5, 0.75].map(|p| percentile_sorted(&doses, p));
    check_edges(channel, &edges)?;
    let top: Vec<f64> = doses.iter().copied().filter(|&d| d > edges[2]).collect();
    let top_dose = if top.is_empty() {
        edges[2]
    } else {
        percentile_sorted(&top, 0.9)
    };
    Ok((edges, top_dose))
}

/// Quartiles of the nonzero doses of each channel.
pub fn fit_action_space(cohort: &[PatientTrajectory]) -> Result<ActionSpace, MdpError> {
    let records = || cohort.iter().flat_map(|p| p.timesteps.iter());
    let fluids: Vec<f64> = records()
        .map(|r| r.fluid_dose)
        .filter(|&d| d > 0.0)
        .collect();
    let vasos: Vec<f64> = records()
        .map(|r| r.vaso_dose)
        .filter(|&d| d > 0.0)
        .collect();
    let (fluid_edges, fluid_top_dose) = channel_space(Channel::Fluid, fluids)?;
    let (vaso_edges, vaso_top_dose) = channel_space(Channel::Vaso, vasos)?;
    Ok(ActionSpace {
        fluid_edges,
        vaso_edges,
        fluid_top_dose,
        vaso_top_dose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Demographics, TimestepRecord};

    fn cohort_with(fluids: &[f64], vasos: &[f64]) -> Vec<PatientTrajectory> {
        let n = fluids.len().max(vasos.len());
        let timesteps = (0..n)
            .map(|i| TimestepRecord {
                bin_index: i as u32,
                features: Default::default(),
                fluid_dose: fluids.get(i).copied().unwrap_or(0.0),
                vaso_dose: vasos.get(i).copied().unwrap_or(0.0),
                mech_vent: false,
                sofa: 0,
                sirs: 0,
                imputed: vec![],
            })
            .collect();
        vec![PatientTrajectory {
            patient_id: "p".into(),
            demographics: Demographics {
                age: 1.0,
                gender: "F".into(),
                weight: 1.0,
                comorbidities: Default::default(),
            },
            timesteps,
            died: false,
        }]
    }

    #[test]
    fn quartile_edges_from_nonzero_doses() {
        let f = [0.0, 10.0, 20.0, 30.0, 40.0, 0.0, 50.0, 60.0, 70.0, 80.0];
        let v = [0.1, 0.2, 0.3, 0.4, 0.5];
        let space = fit_action_space(&cohort_with(&f, &v)).unwrap();
        assert_eq!(space.fluid_edges, [27.5, 45.0, 62.5]);
        assert_eq!(space.bin(Channel::Fluid, 45.0), 2);
        assert_eq!(space.bin(Channel::Fluid, 45.0001), 3);
        assert_eq!(space.bin(Channel::Fluid, 27.5), 1);
        assert_eq!(space.bin(Channel::Fluid, 1000.0), 4);
    }

    #[test]
    fn all_zero_channel_is_named() {
        match fit_action_space(&cohort_with(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0])) {
            Err(MdpError::ZeroChannel(Channel::Vaso)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_doses_are_degenerate() {
        let r = fit_action_space(&cohort_with(&[5.0; 6], &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(
            r,
            Err(MdpError::DegenerateQuantiles {
                channel: Channel::Fluid,
                ..
            })
        ));
    }

    #[test]
    fn grid_corners() {
        let s = ActionSpace::new([1.0, 2.0, 3.0], [0.1, 0.2, 0.3], 5.0, 0.5).unwrap();
        assert_eq!(s.discretize_action(0.0, 0.0), 0);
        assert_eq!(s.discretize_action(10.0, 1.0), 24);
        assert_eq!(split_action(24), (4, 4));
        assert_eq!(action_id(2, 3), 13);
    }

    #[test]
    fn deltas() {
        let s = ActionSpace::new([1.0, 2.0, 3.0], [0.1, 0.2, 0.3], 5.0, 0.5).unwrap();
        assert_eq!(
            s.recommended_delta(Channel::Fluid, 0.0, 2),
            DoseChange::Increase
        );
        assert_eq!(
            s.recommended_delta(Channel::Fluid, 2.5, 3),
            DoseChange::NoChange
        );
        assert_eq!(
            s.recommended_delta(Channel::Vaso, 0.9, 1),
            DoseChange::Decrease
        );
    }

    #[test]
    fn representative_doses() {
        let s = ActionSpace::new([10.0, 20.0, 40.0], [0.1, 0.2, 0.3], 90.0, 0.5).unwrap();
        let d: Vec<f64> = (0..5)
            .map(|b| s.representative_dose(Channel::Fluid, b))
            .collect();
        assert_eq!(d, vec![0.0, 5.0, 15.0, 30.0, 90.0]);
    }
}
