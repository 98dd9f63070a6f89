//! Jobs, GPU devices, worker nodes, site policies and factory entries.

mod factory;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adlang::Expr;

pub use factory::{
    parse_factory_entry_xml, parse_resource_slots, static_entry_compat, FactoryEntry, IngestError,
    ResourceSlots, SubmitAttrs, DEFAULT_MAX_WALLTIME_SECS, WALLTIME_UNIT_SECS,
};

pub type Seconds = u64;
pub type MegaBytes = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "ppc64le")]
    Ppc64le,
    #[serde(rename = "aarch64")]
    Aarch64,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::X86_64, Arch::Ppc64le, Arch::Aarch64];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::X86_64 => "x86_64",
            Arch::Ppc64le => "ppc64le",
            Arch::Aarch64 => "aarch64",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One violated invariant, located by a path into the input document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// How a job relates to GPUs, derived from its `RequiresGPU`/`RequestGPUs`
/// pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GpuUseClass {
    MustUseGPU,
    CanUseGPU,
    CpuOnly,
}

/// A workload request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobAd {
    pub id: String,
    #[serde(default)]
    pub submit_time: Seconds,
    pub request_cpus: u32,
    #[serde(rename = "requestMemoryMB")]
    pub request_memory_mb: MegaBytes,
    #[serde(rename = "requestGPUs", default)]
    pub request_gpus: u32,
    #[serde(rename = "requiresGPU", default, with = "flag")]
    pub requires_gpu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cuda_capability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cuda_runtime: Option<String>,
    #[serde(
        rename = "gpuMemoryMB",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub gpu_memory_mb: Option<MegaBytes>,
    pub arch_list: Vec<Arch>,
    pub max_wall_time_secs: Seconds,
    pub run_time_secs: Seconds,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_expr")]
    pub extra_requirements: Option<Expr>,
    #[serde(default)]
    pub priority: i64,
}

impl JobAd {
    /// A CPU-only x86_64 job with the given shape; the remaining fields take
    /// neutral defaults.
    pub fn cpu(
        id: impl Into<String>,
        cpus: u32,
        memory_mb: MegaBytes,
        run_time_secs: Seconds,
    ) -> Self {
        JobAd {
            id: id.into(),
            submit_time: 0,
            request_cpus: cpus,
            request_memory_mb: memory_mb,
            request_gpus: 0,
            requires_gpu: false,
            cuda_capability: None,
            cuda_runtime: None,
            gpu_memory_mb: None,
            arch_list: vec![Arch::X86_64],
            max_wall_time_secs: run_time_secs,
            run_time_secs,
            extra_requirements: None,
            priority: 0,
        }
    }

    pub fn gpu_use(&self) -> GpuUseClass {
        classify_gpu_use(self)
    }

    pub fn validate(&self, path: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad =
            |field: &str, msg: &str| out.push(Violation::new(format!("{}.{}", path, field), msg));
        if self.id.is_empty() {
            bad("id", "must not be empty");
        }
        if self.requires_gpu && self.request_gpus == 0 {
            bad("requestGPUs", "requiresGPU = 1 needs requestGPUs > 0");
        }
        if self.request_cpus < 1 {
            bad("requestCpus", "must be at least 1");
        }
        if self.run_time_secs > self.max_wall_time_secs {
            bad("runTimeSecs", "exceeds maxWallTimeSecs");
        }
        if self.arch_list.is_empty() {
            bad("archList", "must name at least one architecture");
        }
        let mut seen = HashSet::new();
        if !self.arch_list.iter().all(|a| seen.insert(*a)) {
            bad("archList", "duplicate architecture");
        }
        if let Some(c) = self.cuda_capability {
            if !c.is_finite() || c < 0.0 {
                bad("cudaCapability", "must be a non-negative number");
            }
        }
        out
    }
}

/// Maps the `(RequiresGPU, RequestGPUs)` pair onto its use case. The pair
/// `(1, 0)` is rejected at ingestion and classifies as CPU-only here.
pub fn classify_gpu_use(job: &JobAd) -> GpuUseClass {
    match (job.requires_gpu, job.request_gpus > 0) {
        (true, true) => GpuUseClass::MustUseGPU,
        (false, true) => GpuUseClass::CanUseGPU,
        (_, false) => GpuUseClass::CpuOnly,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GpuDevice {
    pub uuid: String,
    pub device_name: String,
    pub cuda_capability: f64,
    #[serde(rename = "globalMemoryMB")]
    pub global_memory_mb: MegaBytes,
    pub driver_version: String,
    pub max_supported_version: i64,
    pub supported_runtimes: Vec<String>,
    pub clock_mhz: f64,
    #[serde(rename = "computeUnits")]
    pub compute_units: u32,
    #[serde(rename = "coresPerCU")]
    pub cores_per_cu: u32,
    pub ecc_enabled: bool,
    /// Host driver version as reported by the node-side runtime probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nvidia_driver_version: Option<String>,
}

impl GpuDevice {
    fn model_key(&self) -> (&str, u64, MegaBytes, &str) {
        (
            &self.device_name,
            self.cuda_capability.to_bits(),
            self.global_memory_mb,
            &self.driver_version,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeSpec {
    pub node_id: String,
    pub site_name: String,
    pub cpus: u32,
    #[serde(rename = "memoryMB")]
    pub memory_mb: MegaBytes,
    pub arch: Arch,
    #[serde(default)]
    pub gpus: Vec<GpuDevice>,
}

impl NodeSpec {
    pub fn validate(&self, path: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.cpus == 0 {
            out.push(Violation::new(
                format!("{}.cpus", path),
                "must be at least 1",
            ));
        }
        if let Some(first) = self.gpus.first() {
            for (i, g) in self.gpus.iter().enumerate() {
                if g.model_key() != first.model_key() {
                    out.push(Violation::new(
                        format!("{}.gpus[{}]", path, i),
                        "GPU model differs from gpus[0]; nodes must be GPU-homogeneous",
                    ));
                }
                if g.supported_runtimes.is_empty() {
                    out.push(Violation::new(
                        format!("{}.gpus[{}].supportedRuntimes", path, i),
                        "must not be empty",
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PostWindow {
    OpenToCpu,
    ReturnToSite,
}

pub const DEFAULT_HOLD_WINDOW_SECS: Seconds = 1800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SitePolicy {
    pub site_name: String,
    #[serde(default = "default_hold")]
    pub hold_window_secs: Seconds,
    #[serde(default = "default_post_window")]
    pub post_window: PostWindow,
    pub max_queued_pilots: u32,
    #[serde(default = "default_grant_period")]
    pub ce_grant_period_secs: Seconds,
}

fn default_hold() -> Seconds {
    DEFAULT_HOLD_WINDOW_SECS
}

fn default_post_window() -> PostWindow {
    PostWindow::OpenToCpu
}

fn default_grant_period() -> Seconds {
    60
}

impl SitePolicy {
    pub fn new(site_name: impl Into<String>, max_queued_pilots: u32) -> Self {
        SitePolicy {
            site_name: site_name.into(),
            hold_window_secs: DEFAULT_HOLD_WINDOW_SECS,
            post_window: PostWindow::OpenToCpu,
            max_queued_pilots,
            ce_grant_period_secs: default_grant_period(),
        }
    }
}

/// `RequiresGPU` travels as 0/1 but is accepted as a boolean too.
mod flag {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    struct FlagVisitor;

    impl Visitor<'_> for FlagVisitor {
        type Value = bool;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("0, 1 or a boolean")
        }

        fn visit_bool<E: de::Error>(self, v: bool) -> Result<bool, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<bool, E> {
            match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(E::custom(format!("flag must be 0 or 1, got {}", v))),
            }
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<bool, E> {
            u64::try_from(v)
                .map_err(|_| E::custom(format!("flag must be 0 or 1, got {}", v)))
                .and_then(|v| self.visit_u64(v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        d.deserialize_any(FlagVisitor)
    }
}

/// Optional expression stored as its source text.
pub(crate) mod opt_expr {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use crate::adlang::{parse_expression, Expr};

    pub fn serialize<S: Serializer>(v: &Option<Expr>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(e) => s.serialize_str(&e.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Expr>, D::Error> {
        let text: Option<String> = Option::deserialize(d)?;
        text.map(|t| parse_expression(&t).map_err(de::Error::custom))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(requires: bool, gpus: u32) -> JobAd {
        let mut j = JobAd::cpu("j", 1, 2000, 100);
        j.requires_gpu = requires;
        j.request_gpus = gpus;
        j
    }

    #[test]
    fn gpu_use_cases() {
        assert_eq!(classify_gpu_use(&job(true, 1)), GpuUseClass::MustUseGPU);
        assert_eq!(classify_gpu_use(&job(false, 1)), GpuUseClass::CanUseGPU);
        assert_eq!(classify_gpu_use(&job(false, 0)), GpuUseClass::CpuOnly);
        // the fourth combination never gets past validation
        assert!(!job(true, 0).validate("job").is_empty());
        for (r, g) in [(true, 1), (false, 1), (false, 0), (true, 3), (false, 4)] {
            assert!(job(r, g).validate("job").is_empty());
        }
    }

    #[test]
    fn job_validation_paths() {
        let mut j = job(false, 0);
        j.request_cpus = 0;
        j.run_time_secs = 200;
        j.arch_list = vec![Arch::X86_64, Arch::X86_64];
        let v = j.validate("workload[0].template");
        let paths: Vec<_> = v.iter().map(|v| v.path.as_str()).collect();
        assert!(paths.contains(&"workload[0].template.requestCpus"));
        assert!(paths.contains(&"workload[0].template.runTimeSecs"));
        assert!(paths.contains(&"workload[0].template.archList"));
    }

    #[test]
    fn job_json_field_names() {
        let mut j = job(true, 1);
        j.gpu_memory_mb = Some(8000);
        j.cuda_runtime = Some("11.4".into());
        j.extra_requirements = Some(crate::adlang::parse_expression("Machine.CPUs >= 8").unwrap());
        let v = serde_json::to_value(&j).unwrap();
        for key in [
            "id",
            "submitTime",
            "requestCpus",
            "requestMemoryMB",
            "requestGPUs",
            "requiresGPU",
            "cudaRuntime",
            "gpuMemoryMB",
            "archList",
            "maxWallTimeSecs",
            "runTimeSecs",
            "extraRequirements",
            "priority",
        ] {
            assert!(v.get(key).is_some(), "missing {}", key);
        }
        assert_eq!(v["requiresGPU"], 1);
        let back: JobAd = serde_json::from_value(v).unwrap();
        assert_eq!(back, j);
        let with_bool: JobAd = serde_json::from_str(
            r#"{"id":"a","requestCpus":1,"requestMemoryMB":1,"requiresGPU":true,"requestGPUs":1,
                "archList":["aarch64"],"maxWallTimeSecs":1,"runTimeSecs":1}"#,
        )
        .unwrap();
        assert!(with_bool.requires_gpu);
        assert!(serde_json::from_str::<JobAd>(
            r#"{"id":"a","requestCpus":1,"requestMemoryMB":1,"requiresGPU":2,
                "archList":["x86_64"],"maxWallTimeSecs":1,"runTimeSecs":1}"#
        )
        .is_err());
    }

    #[test]
    fn heterogeneous_node_rejected() {
        let dev = |uuid: &str, name: &str| GpuDevice {
            uuid: uuid.into(),
            device_name: name.into(),
            cuda_capability: 8.0,
            global_memory_mb: 40536,
            driver_version: "11.3".into(),
            max_supported_version: 11030,
            supported_runtimes: vec!["11.0".into()],
            clock_mhz: 1410.0,
            compute_units: 108,
            cores_per_cu: 64,
            ecc_enabled: true,
            nvidia_driver_version: None,
        };
        let mut node = NodeSpec {
            node_id: "n".into(),
            site_name: "s".into(),
            cpus: 8,
            memory_mb: 32000,
            arch: Arch::X86_64,
            gpus: vec![dev("a", "A100"), dev("b", "A100")],
        };
        assert!(node.validate("n").is_empty());
        node.gpus[1].device_name = "V100".into();
        assert_eq!(node.validate("n").len(), 1);
    }

    #[test]
    fn arch_names() {
        assert_eq!(Arch::parse(" PPC64LE "), Some(Arch::Ppc64le));
        assert_eq!(Arch::parse("riscv64"), None);
        assert_eq!(
            serde_json::to_string(&Arch::Aarch64).unwrap(),
            "\"aarch64\""
        );
    }
}
