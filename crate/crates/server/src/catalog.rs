use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use vfm_core::checkpoint::Checkpoint;
use vfm_core::data::read_item_titles;
use vfm_core::elicitation::FrozenModel;
use vfm_core::train::Predictor;
use vfm_core::Result;

/// The frozen model plus whatever item metadata is available.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub model: FrozenModel,
    /// Titles keyed by item id (position in the item group).
    pub titles: HashMap<usize, String>,
}

impl Catalog {
    /// Items the training set never contained are left out when the
    /// checkpoint records feature counts: their posterior is just the prior.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.predictor(Predictor::Mean);
        let mut model = FrozenModel::new(params, &ckpt.space, ckpt.config.task)?;
        if let Some(counts) = &ckpt.feature_counts {
            let seen = (0..model.num_items())
                .filter(|&j| counts[model.item_feature(j)] > 0)
                .collect();
            model = model.with_catalog(seen)?;
        }
        Ok(Catalog {
            model,
            titles: HashMap::new(),
        })
    }

    pub fn load(checkpoint: &Path, items_file: Option<&Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let mut catalog = Self::from_checkpoint(&ckpt)?;
        if let Some(path) = items_file {
            let titles = read_item_titles(BufReader::new(File::open(path)?))?;
            catalog.attach_titles(&ckpt, titles);
        }
        Ok(catalog)
    }

    /// Matches raw item ids to positions through the feature labels
    /// (`item:<raw id>`); without labels the position is the raw id.
    pub fn attach_titles(&mut self, ckpt: &Checkpoint, titles: Vec<(usize, String)>) {
        let space = &ckpt.space;
        let mut raw_to_pos = HashMap::new();
        for j in 0..self.model.num_items() {
            let raw = space
                .label(self.model.item_feature(j))
                .and_then(|l| l.strip_prefix("item:"))
                .and_then(|r| r.parse::<usize>().ok())
                .unwrap_or(j);
            raw_to_pos.insert(raw, j);
        }
        self.titles = titles
            .into_iter()
            .filter_map(|(raw, title)| raw_to_pos.get(&raw).map(|&j| (j, title)))
            .collect();
    }

    pub fn title(&self, item: usize) -> Option<String> {
        self.titles.get(&item).cloned()
    }
}
