//! JSON model checkpoint: feature space, every variational parameter, the
//! iterate average and the training configuration, behind a versioned header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::averaging::IterateAverage;
use crate::data::FeatureSpace;
use crate::params::VariationalParams;
use crate::train::{Predictor, TrainConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "vfm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub space: FeatureSpace,
    pub config: TrainConfig,
    pub params: VariationalParams,
    pub average: Option<IterateAverage>,
    /// `N_k` of the training set, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_counts: Option<Vec<usize>>,
}

impl Checkpoint {
    pub fn new(
        space: FeatureSpace,
        config: TrainConfig,
        params: VariationalParams,
        average: Option<IterateAverage>,
    ) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            space,
            config,
            params,
            average,
            feature_counts: None,
        }
    }

    pub fn with_feature_counts(mut self, counts: Vec<usize>) -> Self {
        self.feature_counts = Some(counts);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut out, self)?;
            out.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "not a checkpoint (format {:?})",
                self.format
            )));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                self.version
            )));
        }
        // Re-run the structural checks serde bypasses.
        let p = &self.params;
        VariationalParams::from_parts(*p.layout(), p.group_table().to_vec(), p.values.clone())?;
        if p.group_table() != self.space.group_table().as_slice() || p.layout().num_groups != self.space.num_groups() {
            return Err(Error::Checkpoint(
                "parameters do not match the stored feature space".into(),
            ));
        }
        if self
            .feature_counts
            .as_ref()
            .is_some_and(|c| c.len() != self.space.num_features())
        {
            return Err(Error::Checkpoint(
                "feature counts do not match the stored feature space".into(),
            ));
        }
        Ok(())
    }

    /// Errors unless `space` has the same layout as the checkpoint.
    pub fn check_space(&self, space: &FeatureSpace) -> Result<()> {
        if space.groups() != self.space.groups() {
            return Err(Error::Checkpoint(format!(
                "feature space mismatch: checkpoint has {} features in {} groups, data has {} in {}",
                self.space.num_features(),
                self.space.num_groups(),
                space.num_features(),
                space.num_groups()
            )));
        }
        Ok(())
    }

    pub fn predictor(&self, which: Predictor) -> VariationalParams {
        match (which, &self.average) {
            (Predictor::Mean, Some(avg)) => avg.apply(&self.params),
            _ => self.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;

    #[test]
    fn roundtrip_is_exact() {
        let space = FeatureSpace::from_sizes([("user", 4), ("item", 3)]);
        let params = VariationalParams::initialize(&space, 3, &Default::default(), 9);
        let mut avg = IterateAverage::new(&params);
        avg.record(&params);
        let ckpt = Checkpoint::new(space, TrainConfig::new(Task::Regression), params, Some(avg))
            .with_feature_counts(vec![1, 0, 2, 3, 0, 0, 5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn wrong_header_or_space() {
        let space = FeatureSpace::from_sizes([("a", 2)]);
        let params = VariationalParams::initialize(&space, 1, &Default::default(), 0);
        let mut ckpt = Checkpoint::new(space.clone(), TrainConfig::new(Task::Regression), params, None);
        assert!(ckpt.check_space(&space).is_ok());
        assert!(ckpt.check_space(&FeatureSpace::from_sizes([("a", 3)])).is_err());
        ckpt.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        ckpt.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
