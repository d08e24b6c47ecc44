use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Location;

/// One robot's sensing-cycle record: actual sensed sites, values and times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationBatch {
    pub robot_id: usize,
    pub locations: Vec<Location>,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
}

impl ObservationBatch {
    pub fn new(
        robot_id: usize,
        locations: Vec<Location>,
        values: Vec<f64>,
        times: Vec<f64>,
    ) -> Result<Self> {
        let b = Self {
            robot_id,
            locations,
            values,
            times,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.locations.len();
        if self.values.len() != n || self.times.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.values.len().min(self.times.len()),
            });
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "batch timestamps must be non-decreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}
