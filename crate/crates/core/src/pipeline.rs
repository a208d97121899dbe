//! The end-to-end search pipeline: antihub subsampling, PCA, graph index and
//! k-means entry points, plus batched search that maps results back to
//! original database ids.

use std::borrow::Cow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::antihub::{self, HubnessProfile, DEFAULT_K_HUB};
use crate::dataset::{NeighborList, VectorSet};
use crate::entrypoint::{self, EntryPointSelector, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::graph::{self, BuildParams, GraphIndex, KnnGraphMethod, SearchParams};
use crate::metrics;
use crate::pca::{self, PcaModel};

/// Order of the two build-time reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    #[default]
    SubsampleThenPca,
    PcaThenSubsample,
}

/// Everything needed to build and query one pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Target PCA dimension; `None` or the source dimension disables PCA.
    pub d: Option<usize>,
    pub alpha: f64,
    /// k-means clusters for entry selection; 0 searches from the graph's
    /// navigating node.
    pub num_clusters: usize,
    pub max_degree: usize,
    pub build_pool: usize,
    pub pool_size: usize,
    pub k_hub: usize,
    pub k: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub order: StageOrder,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            d: None,
            alpha: 1.0,
            num_clusters: 1,
            max_degree: graph::DEFAULT_MAX_DEGREE,
            build_pool: graph::DEFAULT_BUILD_POOL,
            pool_size: 64,
            k_hub: DEFAULT_K_HUB,
            k: 10,
            kmeans_iters: DEFAULT_MAX_ITERS,
            seed: 0,
            order: StageOrder::SubsampleThenPca,
        }
    }
}

impl PipelineParams {
    pub fn search_params(&self) -> SearchParams {
        SearchParams::new(self.k, self.pool_size)
    }
}

/// Wall-clock seconds spent in each build stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildTimings {
    pub subsample: f64,
    pub pca: f64,
    pub graph: f64,
    pub kmeans: f64,
}

impl BuildTimings {
    pub fn total(&self) -> f64 {
        self.subsample + self.pca + self.graph + self.kmeans
    }
}

/// A built pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub pca: Option<PcaModel>,
    pub index: GraphIndex,
    pub selector: Option<EntryPointSelector>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Argument(m) => Error::Argument(format!("{name}: {m}")),
        other => other,
    })
}

impl Pipeline {
    /// Builds every stage on `base`. `profile`, if given, must be the
    /// hubness profile of `base` itself; it is only used when subsampling
    /// runs before PCA.
    pub fn build(
        base: &VectorSet,
        params: &PipelineParams,
        profile: Option<&HubnessProfile>,
    ) -> Result<(Self, BuildTimings)> {
        let mut timings = BuildTimings::default();
        let d0 = base.dim();
        let pca_dim = params.d.filter(|&d| d != d0);
        if let Some(d) = params.d {
            if d == 0 || d > d0 {
                return Err(Error::arg(format!("pca: target dim {d} not in [1, {d0}]")));
            }
        }
        if !(params.alpha > 0.0 && params.alpha <= 1.0) {
            return Err(Error::arg(format!("subsample: alpha {} not in (0, 1]", params.alpha)));
        }

        let subsample = |vs: &VectorSet, profile: Option<&HubnessProfile>| -> Result<VectorSet> {
            let owned;
            let profile = match profile {
                Some(p) => p,
                None => {
                    owned = antihub::k_occurrence(vs, params.k_hub)?;
                    &owned
                }
            };
            antihub::antihub_subsample(vs, profile, params.alpha)
        };

        let mut current: Cow<VectorSet> = Cow::Borrowed(base);
        let mut model = None;
        match params.order {
            StageOrder::SubsampleThenPca => {
                if params.alpha < 1.0 {
                    let t = Instant::now();
                    current = Cow::Owned(stage("subsample", subsample(&current, profile))?);
                    timings.subsample = t.elapsed().as_secs_f64();
                }
                if let Some(d) = pca_dim {
                    let t = Instant::now();
                    let m = stage("pca", pca::pca_fit(&current, d))?;
                    current = Cow::Owned(stage("pca", pca::pca_transform(&m, &current))?);
                    model = Some(m);
                    timings.pca = t.elapsed().as_secs_f64();
                }
            }
            StageOrder::PcaThenSubsample => {
                if let Some(d) = pca_dim {
                    let t = Instant::now();
                    let m = stage("pca", pca::pca_fit(&current, d))?;
                    current = Cow::Owned(stage("pca", pca::pca_transform(&m, &current))?);
                    model = Some(m);
                    timings.pca = t.elapsed().as_secs_f64();
                }
                if params.alpha < 1.0 {
                    let t = Instant::now();
                    current = Cow::Owned(stage("subsample", subsample(&current, None))?);
                    timings.subsample = t.elapsed().as_secs_f64();
                }
            }
        }

        let t = Instant::now();
        let reduced = current.into_owned();
        let index = stage(
            "build",
            graph::build_index_with(
                reduced,
                &BuildParams {
                    max_degree: params.max_degree,
                    build_pool: params.build_pool,
                    seed: params.seed,
                    knn_method: KnnGraphMethod::Auto,
                },
            ),
        )?;
        timings.graph = t.elapsed().as_secs_f64();

        let selector = if params.num_clusters > 0 {
            let t = Instant::now();
            let s = stage(
                "kmeans",
                entrypoint::kmeans_fit(index.base(), params.num_clusters, params.kmeans_iters, params.seed),
            )?;
            timings.kmeans = t.elapsed().as_secs_f64();
            Some(s)
        } else {
            None
        };

        Ok((
            Self {
                pca: model,
                index,
                selector,
            },
            timings,
        ))
    }

    /// Searches a batch of raw (untransformed) queries. Returned ids are ids
    /// in the original database; distances are in the indexed space.
    pub fn search(&self, queries: &VectorSet, params: &SearchParams) -> Result<Vec<NeighborList>> {
        let reduced: Cow<VectorSet> = match &self.pca {
            Some(m) => Cow::Owned(stage("search", pca::pca_transform(m, queries))?),
            None => Cow::Borrowed(queries),
        };
        let mut results = match &self.selector {
            Some(s) => stage("search", entrypoint::batch_search_grouped(&self.index, s, &reduced, params))?,
            None => stage("search", self.index.search_batch(&reduced, params))?,
        };
        let base = self.index.base();
        if base.ids().is_some() {
            for list in &mut results {
                for id in &mut list.ids {
                    *id = base.original_id(*id as usize);
                }
            }
        }
        Ok(results)
    }

    pub fn memory_bytes(&self) -> u64 {
        metrics::memory_estimate(&self.index, self.pca.as_ref(), self.selector.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{brute_force_knn, generate_synthetic, generate_with_queries};
    use crate::metrics::recall_at_k;

    #[test]
    fn disabled_reductions_match_vanilla() {
        let (base, queries) = generate_with_queries(1500, 50, 12, 5, 0.8, 1).unwrap();
        let params = PipelineParams {
            d: Some(12),
            alpha: 1.0,
            num_clusters: 1,
            max_degree: 16,
            build_pool: 32,
            pool_size: 20,
            ..Default::default()
        };
        let (p, _) = Pipeline::build(&base, &params, None).unwrap();
        assert!(p.pca.is_none());
        let vanilla = graph::build_index(base.clone(), 16, 32, 0).unwrap();
        let sp = params.search_params();
        assert_eq!(p.search(&queries, &sp).unwrap(), vanilla.search_batch(&queries, &sp).unwrap());
    }

    #[test]
    fn subsampled_ids_map_to_original() {
        let (base, queries) = generate_with_queries(800, 40, 10, 4, 0.5, 3).unwrap();
        let truth = brute_force_knn(&base, &queries, 10).unwrap();
        for order in [StageOrder::SubsampleThenPca, StageOrder::PcaThenSubsample] {
            let params = PipelineParams {
                d: Some(6),
                alpha: 0.8,
                num_clusters: 4,
                max_degree: 16,
                build_pool: 32,
                pool_size: 64,
                order,
                ..Default::default()
            };
            let (p, _) = Pipeline::build(&base, &params, None).unwrap();
            assert_eq!(p.index.len(), 640);
            let res = p.search(&queries, &params.search_params()).unwrap();
            let kept: std::collections::HashSet<u32> = p.index.base().ids().unwrap().iter().copied().collect();
            assert!(res.iter().flat_map(|r| &r.ids).all(|id| kept.contains(id)));
            let recall = recall_at_k(&truth, &res, 10).unwrap();
            assert!(recall > 0.5, "{order:?}: {recall}");
        }
    }

    #[test]
    fn stage_errors_are_named() {
        let base = generate_synthetic(100, 4, 2, 0.8, 3).unwrap();
        let params = PipelineParams {
            d: Some(9),
            ..Default::default()
        };
        let err = Pipeline::build(&base, &params, None).unwrap_err();
        assert!(err.to_string().contains("pca"), "{err}");
        let params = PipelineParams {
            alpha: 0.05,
            max_degree: 4,
            build_pool: 8,
            ..Default::default()
        };
        let (p, _) = Pipeline::build(&base, &params, None).unwrap();
        let queries = generate_synthetic(3, 4, 2, 0.8, 5).unwrap();
        let err = p.search(&queries, &params.search_params()).unwrap_err();
        assert!(err.to_string().contains("search"), "{err}");
    }
}
