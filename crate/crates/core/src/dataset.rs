//! Model-ready instances: one per (sample, scored focal track).

use rayon::prelude::*;

use crate::benchmark::{Sample, CURRENT_T, OBS_STEPS, PRED_STEPS};
use crate::error::{Error, Result};
use crate::features::{extract, FeatureConfig, MapMatrix, Point, SocialMatrix};
use crate::scene::Behavior;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub sample_id: String,
    pub focal_id: String,
    /// Generating behavior, when the focal id follows the synthetic scheme.
    pub behavior: Option<Behavior>,
    pub social: SocialMatrix,
    pub map: MapMatrix,
    /// Observed focal positions `(t, position)` in the focal frame, oldest
    /// first.
    pub history: Vec<(i64, Point)>,
    /// 60 future focal positions in the focal frame.
    pub target: Vec<Point>,
}

impl Instance {
    pub fn build(sample: &Sample, focal_id: &str, cfg: &FeatureConfig) -> Result<Self> {
        let features = extract(sample, focal_id, cfg)?;
        let track = sample
            .track(focal_id)
            .expect("extract checked the focal track");
        let history = track
            .states
            .iter()
            .filter(|s| s.t <= CURRENT_T)
            .map(|s| (s.t, features.frame.apply(s.pos())))
            .collect();
        let target = (1..=PRED_STEPS as i64)
            .map(|k| {
                track
                    .state_at(CURRENT_T + k)
                    .map(|s| features.frame.apply(s.pos()))
                    .ok_or_else(|| {
                        Error::validation(format!(
                            "focal `{focal_id}` in `{}` has no state at t={}",
                            sample.id,
                            CURRENT_T + k
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        Ok(Instance {
            sample_id: sample.id.clone(),
            focal_id: focal_id.to_owned(),
            behavior: Behavior::from_track_id(focal_id),
            social: features.social,
            map: features.map,
            history,
            target,
        })
    }

    /// Copy that only sees the `keep` most recent observed steps, in the
    /// social matrix and in the focal history alike.
    pub fn truncated(&self, keep: usize) -> Result<Self> {
        if !(1..=OBS_STEPS).contains(&keep) {
            return Err(Error::validation(format!(
                "observed steps {keep} outside 1..={OBS_STEPS}"
            )));
        }
        let mut out = self.clone();
        out.social.truncate_history(keep);
        let oldest = OBS_STEPS as i64 - keep as i64;
        out.history.retain(|(t, _)| *t >= oldest);
        Ok(out)
    }
}

/// Every scored track of every sample, in sample order then track order.
/// Feature extraction runs on the current rayon pool; the output order does
/// not depend on the thread count.
pub fn build_instances(samples: &[Sample], cfg: &FeatureConfig) -> Result<Vec<Instance>> {
    let nested: Vec<Vec<Instance>> = samples
        .par_iter()
        .map(|s| {
            s.scored()
                .map(|t| Instance::build(s, &t.id, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
