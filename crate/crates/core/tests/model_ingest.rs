mod common;

use proptest::prelude::*;

use glidepool::adlang::{AdKind, ClassAd, Value};
use glidepool::model::{
    classify_gpu_use, parse_factory_entry_xml, static_entry_compat, Arch, FactoryEntry,
    GpuUseClass, JobAd, ResourceSlots, SitePolicy, SubmitAttrs,
};
use glidepool::sitesim::{build_slot_ad, Pilot, PilotState};

const WISCONSIN: &str = include_str!("data/wisconsin_gpu_entry.xml");

fn wisconsin_expected() -> FactoryEntry {
    FactoryEntry {
        name: "CMSHTPC_T2_US_Wisconsin_cmsgrid01_gpu".into(),
        gatekeeper: "cmsgrid01.hep.wisc.edu cmsgrid01.hep.wisc.edu:9619".into(),
        gridtype: "condor".into(),
        auth_method: Some("grid_proxy".into()),
        cms_site: "T2_US_Wisconsin".into(),
        submit_attrs: SubmitAttrs {
            max_memory: 20000,
            xcount: 8,
            request_gpus: 1,
        },
        glidein_cpus: 8,
        glidein_max_mem_mbs: 20240,
        glidein_max_walltime_secs: 216000,
        resource_slots: Some(ResourceSlots {
            resource_name: "GPUs".into(),
            count: 1,
            slot_type: "main".into(),
        }),
        arch: Arch::X86_64,
    }
}

#[test]
fn wisconsin_entry_golden() {
    assert_eq!(
        parse_factory_entry_xml(WISCONSIN).unwrap(),
        wisconsin_expected()
    );
}

#[test]
fn entry_without_gpu_request_defaults() {
    let text = WISCONSIN
        .replace("<submit_attr name=\" Request_GPUs\" value=\" 1\"/>", "")
        .replace(
            "<attr name=\"GLIDEIN_Resource_Slots\" type=\"string\" value=\"GPUs,1,\n      type=main\"/>",
            "",
        );
    let e = parse_factory_entry_xml(&text).unwrap();
    assert_eq!(e.submit_attrs.request_gpus, 0);
    assert_eq!(e.resource_slots, None);
    assert!(!e.is_gpu_entry());
}

#[test]
fn malformed_and_incomplete_entries_are_rejected() {
    assert!(parse_factory_entry_xml("<entry name=\"x\">").is_err());
    let no_site = WISCONSIN.replace("GLIDEIN_CMSSite", "GLIDEIN_Somewhere");
    let err = parse_factory_entry_xml(&no_site).unwrap_err();
    assert!(err.to_string().contains("GLIDEIN_CMSSite"), "{}", err);
    let no_cpus = WISCONSIN.replace("GLIDEIN_CPUS", "GLIDEIN_CORES");
    assert!(parse_factory_entry_xml(&no_cpus)
        .unwrap_err()
        .to_string()
        .contains("GLIDEIN_CPUS"));
}

#[test]
fn gpu_use_truth_table() {
    let mut j = JobAd::cpu("j", 1, 1000, 60);
    assert_eq!(classify_gpu_use(&j), GpuUseClass::CpuOnly);
    j.request_gpus = 1;
    assert_eq!(classify_gpu_use(&j), GpuUseClass::CanUseGPU);
    j.requires_gpu = true;
    assert_eq!(classify_gpu_use(&j), GpuUseClass::MustUseGPU);
    j.request_gpus = 0;
    assert!(!j.validate("job").is_empty());
}

#[test]
fn static_compat_examples() {
    let wisc = wisconsin_expected();
    let mut job = JobAd::cpu("g", 8, 16000, 36000);
    job.requires_gpu = true;
    job.request_gpus = 1;
    assert!(static_entry_compat(&job, &wisc));
    let mut cpu_only_entry = wisc.clone();
    cpu_only_entry.resource_slots = None;
    assert!(!static_entry_compat(&job, &cpu_only_entry));
    job.max_wall_time_secs = 259200;
    assert!(!static_entry_compat(&job, &wisc));
}

/// The GPU slot ad shown for the Wisconsin A100 node, reproduced by the pilot
/// startup path and carried through JSON unchanged.
#[test]
fn a100_slot_ad_values_and_json_round_trip() {
    let node = {
        let mut n = common::node(
            "wisc-gpu-0",
            "T2_US_Wisconsin",
            Arch::X86_64,
            vec![common::a100("GPU-a"), common::a100("GPU-b")],
        );
        n.memory_mb = 64000;
        n
    };
    let entry = wisconsin_expected();
    let policy = SitePolicy::new("T2_US_Wisconsin", 4);
    let mut pilot = Pilot::queued("p1", &entry, 0);
    pilot.transition(PilotState::Starting, 0).unwrap();
    let ad = build_slot_ad(&pilot, &node, &entry, &policy, 0);

    let expect = [
        ("CPUs", Value::Integer(8)),
        ("TotalSlotMemory", Value::Integer(20000)),
        ("GPUs", Value::Integer(2)),
        ("CUDACapability", Value::Real(8.0)),
        ("CUDAClockMhz", Value::Real(1410.0)),
        ("CUDAComputeUnits", Value::Integer(108)),
        ("CUDACoresPerCU", Value::Integer(64)),
        (
            "CUDADeviceName",
            Value::Text("NVIDIA A100-PCIE-40GB".into()),
        ),
        ("CUDADriverVersion", Value::Real(11.3)),
        ("CUDAECCEnabled", Value::Boolean(true)),
        ("CUDAGlobalMemoryMB", Value::Integer(40536)),
        ("CUDAMaxSupportedVersion", Value::Integer(11030)),
        (
            "CMS_CUDA_SUPPORTED_RUNTIMES",
            Value::Text("10.1,10.2,11.0,11.1".into()),
        ),
        ("CMS_NVIDIA_DRIVER_VERSION", Value::Text("515.48.07".into())),
    ];
    for (name, value) in expect {
        assert_eq!(ad.literal(name), Some(&value), "{}", name);
    }

    let json = serde_json::to_string(&ad).unwrap();
    let back: ClassAd = serde_json::from_str(&json).unwrap();
    assert_eq!(back, ad);
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
}

#[test]
fn listed_slot_ad_text_round_trips_through_json() {
    let text = r#"CPUs = 8
TotalSlotMemory = 20000
GPUs = 2
CUDACapability = 8.0
CUDAClockMhz = 1410.0
CUDAComputeUnits = 108
CUDACoresPerCU = 64
CUDADeviceName = "NVIDIA A100-PCIE-40GB"
CUDADriverVersion = 11.3
CUDAECCEnabled = true
CUDAGlobalMemoryMB = 40536
CUDAMaxSupportedVersion = 11030
CMS_CUDA_SUPPORTED_RUNTIMES = "10.1,10.2,11.0,11.1"
CMS_NVIDIA_DRIVER_VERSION = "515.48.07""#;
    let ad = ClassAd::parse_lines(AdKind::Machine, text).unwrap();
    assert_eq!(ad.len(), 14);
    let back: ClassAd = serde_json::from_str(&serde_json::to_string(&ad).unwrap()).unwrap();
    assert_eq!(back, ad);
    assert_eq!(back.to_string().trim_end(), text);
}

fn token() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_&<>\"' .:-]{1,24}".prop_filter("trimmed", |s| s.trim() == s && !s.is_empty())
}

fn arch() -> impl Strategy<Value = Arch> {
    proptest::sample::select(Arch::ALL.to_vec())
}

fn factory_entry() -> impl Strategy<Value = FactoryEntry> {
    let slots = prop_oneof![
        Just(None),
        (1u32..9, "[a-z]{1,6}").prop_map(|(count, ty)| Some(ResourceSlots {
            resource_name: "GPUs".into(),
            count,
            slot_type: ty,
        })),
        (0u32..9, "[A-Za-z]{1,6}").prop_map(|(count, name)| Some(ResourceSlots {
            resource_name: format!("X{}", name),
            count,
            slot_type: "main".into(),
        })),
    ];
    (
        (
            token(),
            token(),
            "[a-z]{0,8}",
            proptest::option::of(token()),
            token(),
        ),
        (any::<u32>(), any::<u32>(), any::<u32>()),
        (1u32..256, any::<u32>(), any::<u32>(), slots, arch()),
    )
        .prop_map(
            |(
                (name, gatekeeper, gridtype, auth_method, cms_site),
                (max_memory, xcount, request_gpus),
                rest,
            )| {
                let (glidein_cpus, mem, wall, resource_slots, arch) = rest;
                FactoryEntry {
                    name,
                    gatekeeper,
                    gridtype,
                    auth_method,
                    cms_site,
                    submit_attrs: SubmitAttrs {
                        max_memory: u64::from(max_memory),
                        xcount,
                        request_gpus,
                    },
                    glidein_cpus,
                    glidein_max_mem_mbs: u64::from(mem),
                    glidein_max_walltime_secs: u64::from(wall),
                    resource_slots,
                    arch,
                }
            },
        )
}

fn job() -> impl Strategy<Value = JobAd> {
    (
        1u32..16,
        0u64..40000,
        0u32..4,
        any::<bool>(),
        prop::collection::btree_set(arch(), 1..=3),
        0u64..300_000,
    )
        .prop_map(|(cpus, mem, gpus, requires, archs, wall)| {
            let mut j = JobAd::cpu("j", cpus, mem, wall);
            j.request_gpus = gpus;
            j.requires_gpu = requires && gpus > 0;
            j.arch_list = archs.into_iter().collect();
            j
        })
}

proptest! {
    #[test]
    fn entry_xml_round_trip(e in factory_entry()) {
        prop_assert_eq!(parse_factory_entry_xml(&e.to_xml()).unwrap(), e);
    }

    #[test]
    fn relaxing_a_job_keeps_it_compatible(
        j in job(),
        e in factory_entry(),
        less_cpus in 0u32..16,
        less_mem in 0u64..40000,
        less_wall in 0u64..300_000,
        more_archs in prop::collection::btree_set(arch(), 0..=3),
    ) {
        let mut relaxed = j.clone();
        relaxed.request_cpus = j.request_cpus.saturating_sub(less_cpus).max(1);
        relaxed.request_memory_mb = j.request_memory_mb.saturating_sub(less_mem);
        relaxed.max_wall_time_secs = j.max_wall_time_secs.saturating_sub(less_wall);
        for a in more_archs {
            if !relaxed.arch_list.contains(&a) {
                relaxed.arch_list.push(a);
            }
        }
        if static_entry_compat(&j, &e) {
            prop_assert!(static_entry_compat(&relaxed, &e));
        }
    }

    #[test]
    fn job_json_round_trip(j in job()) {
        let text = serde_json::to_string(&j).unwrap();
        prop_assert_eq!(serde_json::from_str::<JobAd>(&text).unwrap(), j);
    }
}
