//! End-to-end reconstruction: hull (or random) initialization, training and
//! held-out evaluation, driven by one declarative config.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, View};
use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, RenderSettings};
use crate::geometry::Aabb;
use crate::hull::{self, InitOptions};
use crate::metrics;
use crate::optim::{self, TrainConfig, TrainLog};
use crate::raster::render;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Carve the visual hull of the training silhouettes.
    #[default]
    Hull,
    /// Uniform random points in the scene bounds.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub mode: InitMode,
    /// Uniform samples drawn in the bounds before carving.
    pub samples: usize,
    /// Upper bound on the number of Gaussians; carved points beyond it are
    /// dropped (they are already in random order). Also the point count of
    /// random initialization.
    pub max_gaussians: usize,
    pub opacity: f64,
    pub knn: usize,
    pub sh_degree: usize,
    /// Overrides the dataset bounds; without either, `[-1, 1]^3`.
    pub bounds: Option<Aabb>,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mode: InitMode::Hull,
            samples: 1_000_000,
            max_gaussians: 4_000,
            opacity: 0.1,
            knn: 3,
            sh_degree: 0,
            bounds: None,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn bounds_for(&self, ds: &Dataset) -> Aabb {
        self.bounds.or(ds.bounds).unwrap_or_else(|| Aabb::cube(1.0))
    }

    fn options(&self) -> InitOptions {
        InitOptions {
            opacity: self.opacity,
            knn: self.knn,
            sh_degree: self.sh_degree,
        }
    }
}

/// What initialization produced.
#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub carved: usize,
    pub excluded: usize,
    pub gaussians: usize,
}

/// Carves and colors the visual hull of the training views.
pub fn hull_cloud(ds: &Dataset, cfg: &InitConfig) -> Result<(GaussianCloud, InitReport)> {
    let silhouettes = ds.train_silhouettes()?;
    let bounds = cfg.bounds_for(ds);
    let mut carved = hull::carve(&silhouettes, &bounds, cfg.samples, cfg.seed)?;
    if carved.empty {
        return Err(Error::InvalidInput(
            "visual hull is empty; check silhouettes, poses and bounds".into(),
        ));
    }
    let n_carved = carved.points.len();
    carved.points.truncate(cfg.max_gaussians);
    let pairs: Vec<_> = ds.train().map(|v| (&v.camera, &v.image)).collect();
    let colored = hull::assign_colors(&carved.points, &pairs)?;
    let cloud = hull::init_gaussians(&colored.samples, &cfg.options())?;
    let report = InitReport {
        carved: n_carved,
        excluded: colored.excluded,
        gaussians: cloud.len(),
    };
    Ok((cloud, report))
}

pub fn initialize(ds: &Dataset, cfg: &InitConfig) -> Result<(GaussianCloud, InitReport)> {
    match cfg.mode {
        InitMode::Hull => hull_cloud(ds, cfg),
        InitMode::Random => {
            let cloud = hull::random_init(&cfg.bounds_for(ds), cfg.max_gaussians, cfg.seed, &cfg.options())?;
            let n = cloud.len();
            Ok((
                cloud,
                InitReport {
                    carved: 0,
                    excluded: 0,
                    gaussians: n,
                },
            ))
        }
    }
}

/// Reconstruction settings: initialization plus training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub init: InitConfig,
    pub train: TrainConfig,
}

impl ReconstructConfig {
    /// Training renders against the dataset's background color.
    pub fn for_dataset(mut self, ds: &Dataset) -> Self {
        self.train.render.background = ds.background;
        self
    }
}

pub fn reconstruct(ds: &Dataset, cfg: &ReconstructConfig) -> Result<(GaussianCloud, TrainLog)> {
    ds.validate()?;
    let (init, report) = initialize(ds, &cfg.init)?;
    log::info!(
        "initialized {} gaussians ({} carved, {} unseen)",
        report.gaussians,
        report.carved,
        report.excluded
    );
    let views: Vec<&View> = ds.train().collect();
    optim::train(&views, init, &cfg.train)
}

/// Metrics of one rendered view against its reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn evaluate<'a>(
    cloud: &GaussianCloud,
    views: impl IntoIterator<Item = &'a View>,
    settings: &RenderSettings,
) -> Result<Vec<ViewScore>> {
    views
        .into_iter()
        .map(|v| {
            let out = render(cloud, &v.camera, settings)?;
            Ok(ViewScore {
                name: v.name.clone(),
                psnr: metrics::psnr(&out.color, &v.image.data)?,
                ssim: metrics::ssim(&out.color, &v.image.data, v.image.width, v.image.height)?,
            })
        })
        .collect()
}

/// Mean PSNR and SSIM of a set of scores.
pub fn mean_score(scores: &[ViewScore]) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SceneSpec;

    fn small_dataset() -> Dataset {
        let spec = SceneSpec {
            width: 32,
            height: 32,
            supersample: 1,
            ..SceneSpec::sphere_and_box()
        };
        Dataset {
            views: spec.views().unwrap(),
            bounds: Some(spec.bounds()),
            background: spec.background,
        }
    }

    #[test]
    fn hull_init_respects_cap_and_containment() {
        let ds = small_dataset();
        let cfg = InitConfig {
            samples: 50_000,
            max_gaussians: 500,
            ..Default::default()
        };
        let (cloud, report) = hull_cloud(&ds, &cfg).unwrap();
        assert_eq!(cloud.len(), 500);
        assert!(report.carved > 500);
        let sil = ds.train_silhouettes().unwrap();
        let pts: Vec<_> = (0..cloud.len()).map(|i| cloud.position(i)).collect();
        assert_eq!(hull::containment_violations(&pts, &sil), 0);

        let random = initialize(
            &ds,
            &InitConfig {
                mode: InitMode::Random,
                ..cfg
            },
        )
        .unwrap()
        .0;
        assert_eq!(random.len(), 500);
    }

    #[test]
    fn short_reconstruction_improves_heldout_views() {
        let ds = small_dataset();
        let cfg = ReconstructConfig {
            init: InitConfig {
                samples: 100_000,
                max_gaussians: 1500,
                ..Default::default()
            },
            train: TrainConfig {
                iterations: 150,
                ..Default::default()
            },
        }
        .for_dataset(&ds);
        let (init, _) = initialize(&ds, &cfg.init).unwrap();
        let before = mean_score(&evaluate(&init, ds.heldout(), &cfg.train.render).unwrap());
        let (cloud, log) = reconstruct(&ds, &cfg).unwrap();
        let after = mean_score(&evaluate(&cloud, ds.heldout(), &cfg.train.render).unwrap());
        assert!(after.0 > before.0 + 1.0, "{before:?} -> {after:?}");
        assert!(log.records.first().unwrap().total > log.records.last().unwrap().total);
    }
}
