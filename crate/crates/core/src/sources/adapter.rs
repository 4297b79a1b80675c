use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::debug;

use crate::models::ModelFormat;
use crate::servable::{AspiredVersionList, AspiredVersionsSink, Loader, ServableId};

/// Converts one stage's per-version payload into the next stage's.
/// Adapters must not do expensive I/O; loading belongs to the manager.
pub trait SourceAdapter<In, Out>: Send + Sync {
    fn adapt(&self, id: &ServableId, data: In) -> Out;

    /// Adapts every version of a list, keeping names and version numbers.
    fn adapt_list(&self, list: AspiredVersionList<In>) -> AspiredVersionList<Out> {
        list.map(|id, data| self.adapt(id, data))
    }
}

/// Turns a version directory into an unexecuted loader for one format.
#[derive(Debug, Clone, Copy)]
pub struct FormatAdapter {
    format: ModelFormat,
}

impl FormatAdapter {
    pub fn new(format: ModelFormat) -> Self {
        Self { format }
    }

    pub fn format(&self) -> ModelFormat {
        self.format
    }
}

impl SourceAdapter<PathBuf, Box<dyn Loader>> for FormatAdapter {
    fn adapt(&self, id: &ServableId, path: PathBuf) -> Box<dyn Loader> {
        if !path.exists() {
            debug!("{id}: {} does not exist yet; load will fail", path.display());
        }
        self.format.loader(path)
    }
}

/// Rewrites a storage path prefix, e.g. from a remote mount to a local
/// cache directory.
#[derive(Debug, Clone)]
pub struct RebaseAdapter {
    from: PathBuf,
    to: PathBuf,
}

impl RebaseAdapter {
    pub fn new(from: impl Into<PathBuf>, to: impl Into<PathBuf>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }

    fn rebase(&self, path: &Path) -> PathBuf {
        match path.strip_prefix(&self.from) {
            Ok(rest) => self.to.join(rest),
            Err(_) => path.to_path_buf(),
        }
    }
}

impl SourceAdapter<PathBuf, PathBuf> for RebaseAdapter {
    fn adapt(&self, _id: &ServableId, path: PathBuf) -> PathBuf {
        self.rebase(&path)
    }
}

/// Runs `first` then `second`.
pub struct Chain<A, B, Mid> {
    first: A,
    second: B,
    _mid: PhantomData<fn() -> Mid>,
}

impl<A, B, Mid> Chain<A, B, Mid> {
    pub fn new(first: A, second: B) -> Self {
        Self {
            first,
            second,
            _mid: PhantomData,
        }
    }
}

impl<In, Mid, Out, A, B> SourceAdapter<In, Out> for Chain<A, B, Mid>
where
    A: SourceAdapter<In, Mid>,
    B: SourceAdapter<Mid, Out>,
{
    fn adapt(&self, id: &ServableId, data: In) -> Out {
        let mid = self.first.adapt(id, data);
        self.second.adapt(id, mid)
    }
}

/// A sink of `In` payloads that adapts each list and forwards it downstream.
pub struct AdaptingSink<In, Out> {
    adapter: Box<dyn SourceAdapter<In, Out>>,
    downstream: Arc<dyn AspiredVersionsSink<Out>>,
}

impl<In, Out> AdaptingSink<In, Out> {
    pub fn new(
        adapter: impl SourceAdapter<In, Out> + 'static,
        downstream: Arc<dyn AspiredVersionsSink<Out>>,
    ) -> Self {
        Self {
            adapter: Box::new(adapter),
            downstream,
        }
    }
}

impl<In: Send, Out> AspiredVersionsSink<In> for AdaptingSink<In, Out> {
    fn set_aspired_versions(&self, list: AspiredVersionList<In>) {
        self.downstream
            .set_aspired_versions(self.adapter.adapt_list(list));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AffineModel, AFFINE_MODEL_FILE};
    use std::fs;
    use std::sync::Mutex;

    #[derive(Default)]
    struct Collect(Mutex<Vec<(String, Vec<u64>, Vec<u64>)>>);

    impl AspiredVersionsSink<Box<dyn Loader>> for Collect {
        fn set_aspired_versions(&self, list: AspiredVersionList<Box<dyn Loader>>) {
            let versions = list.versions().iter().map(|v| v.version).collect();
            let estimates = list.versions().iter().map(|v| v.data.estimate_memory()).collect();
            self.0
                .lock()
                .unwrap()
                .push((list.servable_name().to_string(), versions, estimates));
        }
    }

    fn write_model(dir: &Path) -> String {
        fs::create_dir_all(dir).unwrap();
        let json = r#"{"type":"affine","feature_order":["x"],"W":[[1.0]],"b":[0.0]}"#;
        fs::write(dir.join(AFFINE_MODEL_FILE), json).unwrap();
        json.to_string()
    }

    #[test]
    fn wraps_paths_in_loaders() {
        let root = tempfile::tempdir().unwrap();
        let p = root.path().join("m/2");
        write_model(&p);
        let list = AspiredVersionList::from_pairs("m", [(2, p)]).unwrap();
        let mut adapted = FormatAdapter::new(ModelFormat::Affine).adapt_list(list);
        assert_eq!(adapted.versions()[0].version, 2);
        let (_, mut versions) = std::mem::replace(
            &mut adapted,
            AspiredVersionList::empty("x").unwrap(),
        )
        .into_parts();
        let servable = versions[0].data.load().unwrap();
        assert!(servable.downcast_ref::<AffineModel>().is_some());
    }

    #[test]
    fn chained_adapters_keep_versions() {
        let storage = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let json = write_model(&cache.path().join("m/7"));
        let chain = Chain::new(
            RebaseAdapter::new(storage.path(), cache.path()),
            FormatAdapter::new(ModelFormat::Affine),
        );
        let collect = Arc::new(Collect::default());
        let sink = AdaptingSink::new(chain, collect.clone());
        let list = AspiredVersionList::from_pairs(
            "m",
            [(7, storage.path().join("m/7")), (3, storage.path().join("m/3"))],
        )
        .unwrap();
        sink.set_aspired_versions(list);
        let got = collect.0.lock().unwrap();
        assert_eq!(got[0].0, "m");
        assert_eq!(got[0].1, vec![7, 3]);
        // Version 7 resolved into the cache; 3 does not exist there.
        assert_eq!(got[0].2, vec![json.len() as u64, 0]);
    }

    #[test]
    fn file_removed_after_adapt_fails_at_load() {
        let root = tempfile::tempdir().unwrap();
        let p = root.path().join("m/1");
        write_model(&p);
        let mut loader = FormatAdapter::new(ModelFormat::Affine).adapt(&ServableId::new("m", 1), p.clone());
        fs::remove_file(p.join(AFFINE_MODEL_FILE)).unwrap();
        assert!(loader.load().is_err());
    }

    #[test]
    fn rebase_leaves_foreign_paths_alone() {
        let a = RebaseAdapter::new("/remote", "/cache");
        assert_eq!(a.rebase(Path::new("/remote/m/1")), PathBuf::from("/cache/m/1"));
        assert_eq!(a.rebase(Path::new("/other/m/1")), PathBuf::from("/other/m/1"));
    }
}
