//! The model registry: built-in models plus extensions loaded from disk.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{Map, Value};

use super::behavior::{ModelBehavior, ModelError};
use super::extension::{self, ExtensionFactory};
use super::manifest::ModelManifest;
use super::models::{self, RangeSensor, WaypointPlatform, WezWeapon};
use crate::scenario::ModelRef;

/// Constructs behaviours for one registered model.
pub trait ModelFactory: Send + Sync {
    fn create(&self) -> Result<Box<dyn ModelBehavior>, ModelError>;

    /// Model-specific parameter checks beyond the manifest schema, as
    /// `(key, reason)` pairs.
    fn check_params(&self, _params: &Map<String, Value>) -> Vec<(String, String)> {
        Vec::new()
    }
}

/// Model-specific param checks beyond the manifest: (key, problem) pairs.
type ParamCheck = fn(&Map<String, Value>) -> Vec<(String, String)>;

struct BuiltinFactory {
    create: fn() -> Box<dyn ModelBehavior>,
    check: ParamCheck,
}

impl ModelFactory for BuiltinFactory {
    fn create(&self) -> Result<Box<dyn ModelBehavior>, ModelError> {
        Ok((self.create)())
    }

    fn check_params(&self, params: &Map<String, Value>) -> Vec<(String, String)> {
        (self.check)(params)
    }
}

#[derive(Clone)]
pub struct RegisteredModel {
    pub manifest: ModelManifest,
    pub builtin: bool,
    /// `None` for manifest-only entries, which validate but cannot run.
    factory: Option<Arc<dyn ModelFactory>>,
}

impl RegisteredModel {
    pub fn check_params(&self, params: &Map<String, Value>) -> Vec<(String, String)> {
        self.factory.as_ref().map(|f| f.check_params(params)).unwrap_or_default()
    }

    pub fn instantiate(&self) -> Result<Box<dyn ModelBehavior>, ModelError> {
        match &self.factory {
            Some(f) => f.create(),
            None => Err(ModelError::new(format!("model {} has no loaded implementation", self.manifest.model_ref()))),
        }
    }

    /// Manifest defaults overlaid with the agent's explicit params.
    pub fn effective_params(&self, params: &Map<String, Value>) -> Map<String, Value> {
        let mut out: Map<String, Value> =
            self.manifest.params.iter().filter_map(|d| Some((d.key.clone(), d.default.clone()?))).collect();
        out.extend(params.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }
}

impl fmt::Debug for RegisteredModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegisteredModel")
            .field("model", &self.manifest.model_ref())
            .field("builtin", &self.builtin)
            .field("constructible", &self.factory.is_some())
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("invalid manifest {path}: {}", problems.join("; "))]
    ManifestInvalid { path: PathBuf, problems: Vec<String> },
    #[error("cannot load extension artifact {path}: {reason}")]
    ArtifactUnloadable { path: PathBuf, reason: String },
    #[error("model {model} is already registered{}", if *builtin { " as a built-in" } else { "" })]
    DuplicateModel { model: String, builtin: bool },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<ModelRef, RegisteredModel>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The three reference models: `waypoint_platform`, `range_sensor` and `wez_weapon`.
    pub fn with_builtins() -> Self {
        fn none(_: &Map<String, Value>) -> Vec<(String, String)> {
            Vec::new()
        }
        let mut r = Self::empty();
        let builtins: [(ModelManifest, BuiltinFactory); 3] = [
            (
                models::platform_manifest(),
                BuiltinFactory { create: || Box::<WaypointPlatform>::default(), check: models::platform_check },
            ),
            (models::sensor_manifest(), BuiltinFactory { create: || Box::<RangeSensor>::default(), check: none }),
            (
                models::weapon_manifest(),
                BuiltinFactory { create: || Box::<WezWeapon>::default(), check: models::weapon_check },
            ),
        ];
        for (manifest, factory) in builtins {
            let key = ModelRef::new(&manifest.name, &manifest.version);
            r.models.insert(key, RegisteredModel { manifest, builtin: true, factory: Some(Arc::new(factory)) });
        }
        r
    }

    pub fn get(&self, model: &ModelRef) -> Option<&RegisteredModel> {
        self.models.get(model)
    }

    pub fn manifests(&self) -> impl Iterator<Item = &ModelManifest> {
        self.models.values().map(|m| &m.manifest)
    }

    fn admit(&self, manifest: &ModelManifest, path: &Path) -> Result<ModelRef, LoadError> {
        manifest.check().map_err(|problems| LoadError::ManifestInvalid { path: path.to_owned(), problems })?;
        let key = ModelRef::new(&manifest.name, &manifest.version);
        if let Some(b) = self.models.values().find(|m| m.builtin && m.manifest.name == manifest.name) {
            return Err(LoadError::DuplicateModel { model: b.manifest.model_ref(), builtin: true });
        }
        if self.models.contains_key(&key) {
            return Err(LoadError::DuplicateModel { model: key.to_string(), builtin: false });
        }
        Ok(key)
    }

    /// Registers an in-process model implementation.
    pub fn register(&mut self, manifest: ModelManifest, factory: Arc<dyn ModelFactory>) -> Result<(), LoadError> {
        let key = self.admit(&manifest, Path::new("<in-process>"))?;
        self.models.insert(key, RegisteredModel { manifest, builtin: false, factory: Some(factory) });
        Ok(())
    }

    /// Registers a manifest without an implementation: scenarios using it
    /// validate, but runs fail at construction.
    pub fn register_manifest_only(&mut self, manifest: ModelManifest) -> Result<(), LoadError> {
        let key = self.admit(&manifest, Path::new("<manifest>"))?;
        self.models.insert(key, RegisteredModel { manifest, builtin: false, factory: None });
        Ok(())
    }

    /// Loads an extension: validates its manifest, then starts the artifact
    /// once to confirm it answers the handshake with the same name and version.
    pub fn register_extension(&mut self, artifact: &Path, manifest_path: &Path) -> Result<(), LoadError> {
        let manifest = read_manifest(manifest_path)?;
        let key = self.admit(&manifest, manifest_path)?;
        extension::probe(artifact, &manifest)
            .map_err(|reason| LoadError::ArtifactUnloadable { path: artifact.to_owned(), reason })?;
        let factory = ExtensionFactory::new(artifact.to_owned());
        self.models.insert(key, RegisteredModel { manifest, builtin: false, factory: Some(Arc::new(factory)) });
        Ok(())
    }

    /// Loads every `*.manifest.json` in `dir` (sorted by file name). Each
    /// manifest names its executable in `artifact`, relative to `dir`.
    pub fn load_extension_dir(&mut self, dir: &Path) -> Result<Vec<ModelRef>, LoadError> {
        let io = |source| LoadError::Io { path: dir.to_owned(), source };
        let mut manifests: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.json")))
            .collect();
        manifests.sort();
        let mut loaded = Vec::new();
        for path in manifests {
            let manifest = read_manifest(&path)?;
            let artifact = manifest.artifact.as_ref().ok_or_else(|| LoadError::ManifestInvalid {
                path: path.clone(),
                problems: vec!["missing `artifact`".into()],
            })?;
            self.register_extension(&dir.join(artifact), &path)?;
            loaded.push(ModelRef::new(&manifest.name, &manifest.version));
        }
        Ok(loaded)
    }

    /// Registers every manifest in `dir` without loading artifacts.
    pub fn load_manifest_dir(&mut self, dir: &Path) -> Result<Vec<ModelRef>, LoadError> {
        let io = |source| LoadError::Io { path: dir.to_owned(), source };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.json")))
            .collect();
        paths.sort();
        let mut loaded = Vec::new();
        for path in paths {
            let manifest = read_manifest(&path)?;
            let key = ModelRef::new(&manifest.name, &manifest.version);
            self.register_manifest_only(manifest)?;
            loaded.push(key);
        }
        Ok(loaded)
    }
}

/// Built-ins plus every extension found in `dirs`; used at startup and on reload.
pub fn load_registry(dirs: &[PathBuf]) -> Result<ModelRegistry, LoadError> {
    let mut r = ModelRegistry::with_builtins();
    for d in dirs {
        r.load_extension_dir(d)?;
    }
    Ok(r)
}

fn read_manifest(path: &Path) -> Result<ModelManifest, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.to_owned(), source })?;
    serde_json::from_str(&text)
        .map_err(|e| LoadError::ManifestInvalid { path: path.to_owned(), problems: vec![e.to_string()] })
}
