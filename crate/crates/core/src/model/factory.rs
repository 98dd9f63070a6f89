use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{classify_gpu_use, Arch, GpuUseClass, JobAd, MegaBytes, Seconds, Violation};

/// Unit of `GLIDEIN_Max_Walltime` values, in seconds.
pub const WALLTIME_UNIT_SECS: Seconds = 1;

/// Walltime assumed when an entry does not advertise one (48 h).
pub const DEFAULT_MAX_WALLTIME_SECS: Seconds = 48 * 3600;

// per-core memory assumed when GLIDEIN_MaxMemMBs is absent
const DEFAULT_MEM_PER_CORE_MB: MegaBytes = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("no <entry> element found")]
    NoEntry,
    #[error("missing mandatory field {0}")]
    Missing(&'static str),
    #[error("field {field}: invalid value {value:?}: {reason}")]
    Invalid {
        field: String,
        value: String,
        reason: String,
    },
}

/// `GLIDEIN_Resource_Slots` descriptor: `NAME,COUNT,type=TYPE`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResourceSlots {
    pub resource_name: String,
    pub count: u32,
    pub slot_type: String,
}

impl ResourceSlots {
    pub fn is_gpu(&self) -> bool {
        self.resource_name.eq_ignore_ascii_case("GPUs")
    }
}

/// Attributes forwarded to the CE with each pilot submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAttrs {
    #[serde(rename = "maxMemory")]
    pub max_memory: MegaBytes,
    pub xcount: u32,
    #[serde(rename = "Request_GPUs", default)]
    pub request_gpus: u32,
}

/// Static description of one compute element queue, as configured in a pilot
/// factory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FactoryEntry {
    pub name: String,
    pub gatekeeper: String,
    pub gridtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_method: Option<String>,
    pub cms_site: String,
    pub submit_attrs: SubmitAttrs,
    pub glidein_cpus: u32,
    #[serde(rename = "glideinMaxMemMBs")]
    pub glidein_max_mem_mbs: MegaBytes,
    pub glidein_max_walltime_secs: Seconds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_slots: Option<ResourceSlots>,
    #[serde(default = "default_arch")]
    pub arch: Arch,
}

fn default_arch() -> Arch {
    Arch::X86_64
}

impl FactoryEntry {
    /// Number of GPUs each pilot of this entry asks for; zero for CPU entries.
    pub fn gpus_per_pilot(&self) -> u32 {
        match &self.resource_slots {
            Some(rs) if rs.is_gpu() => rs.count,
            _ => 0,
        }
    }

    pub fn is_gpu_entry(&self) -> bool {
        self.gpus_per_pilot() > 0
    }

    pub fn validate(&self, path: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.glidein_cpus < 1 {
            out.push(Violation::new(
                format!("{}.glideinCpus", path),
                "must be at least 1",
            ));
        }
        if let Some(rs) = &self.resource_slots {
            if rs.is_gpu() && rs.count < 1 {
                out.push(Violation::new(
                    format!("{}.resourceSlots.count", path),
                    "GPU resource slots need a count of at least 1",
                ));
            }
        }
        out
    }

    /// Serializes to the factory XML subset read by [`parse_factory_entry_xml`].
    pub fn to_xml(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "<entry name=\"{}\"", esc(&self.name));
        if let Some(auth) = &self.auth_method {
            let _ = write!(s, " auth_method=\"{}\"", esc(auth));
        }
        let _ = writeln!(
            s,
            " gatekeeper=\"{}\" gridtype=\"{}\">",
            esc(&self.gatekeeper),
            esc(&self.gridtype)
        );
        s.push_str("<config>\n<submit>\n   <submit_attrs>\n");
        let sa = &self.submit_attrs;
        let _ = writeln!(
            s,
            "      <submit_attr name=\"+maxMemory\" value=\"{}\"/>",
            sa.max_memory
        );
        let _ = writeln!(
            s,
            "      <submit_attr name=\"+xcount\" value=\"{}\"/>",
            sa.xcount
        );
        let _ = writeln!(
            s,
            "      <submit_attr name=\"Request_GPUs\" value=\"{}\"/>",
            sa.request_gpus
        );
        s.push_str("   </submit_attrs>\n</submit>\n</config>\n   <attrs>\n");
        let mut attr = |name: &str, ty: &str, value: &str| {
            let _ = writeln!(
                s,
                "      <attr name=\"{}\" type=\"{}\" value=\"{}\"/>",
                name,
                ty,
                esc(value)
            );
        };
        attr("GLIDEIN_CMSSite", "string", &self.cms_site);
        attr("GLIDEIN_CPUS", "string", &self.glidein_cpus.to_string());
        attr(
            "GLIDEIN_MaxMemMBs",
            "int",
            &self.glidein_max_mem_mbs.to_string(),
        );
        attr(
            "GLIDEIN_Max_Walltime",
            "int",
            &(self.glidein_max_walltime_secs / WALLTIME_UNIT_SECS).to_string(),
        );
        if let Some(rs) = &self.resource_slots {
            attr(
                "GLIDEIN_Resource_Slots",
                "string",
                &format!("{},{},type={}", rs.resource_name, rs.count, rs.slot_type),
            );
        }
        attr("GLIDEIN_Arch", "string", self.arch.as_str());
        s.push_str("   </attrs>\n</entry>\n");
        s
    }
}

fn esc(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            '\t' => out.push_str("&#9;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

/// Parses a `NAME,COUNT,type=TYPE` resource descriptor. Whitespace around
/// each part is ignored.
pub fn parse_resource_slots(text: &str) -> Result<ResourceSlots, IngestError> {
    let invalid = |reason: &str| IngestError::Invalid {
        field: "GLIDEIN_Resource_Slots".into(),
        value: text.to_string(),
        reason: reason.to_string(),
    };
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [name, count, ty] = parts.as_slice() else {
        return Err(invalid("expected NAME,COUNT,type=TYPE"));
    };
    if name.is_empty() {
        return Err(invalid("empty resource name"));
    }
    let count: u32 = count
        .parse()
        .map_err(|_| invalid("COUNT is not a non-negative integer"))?;
    let slot_type = match ty.split_once('=') {
        Some((k, v)) if k.trim().eq_ignore_ascii_case("type") && !v.trim().is_empty() => v.trim(),
        _ => return Err(invalid("third part must be type=TYPE")),
    };
    Ok(ResourceSlots {
        resource_name: name.to_string(),
        count,
        slot_type: slot_type.to_string(),
    })
}

fn number<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, IngestError> {
    value.trim().parse().map_err(|_| IngestError::Invalid {
        field: field.to_string(),
        value: value.to_string(),
        reason: "expected a non-negative integer".into(),
    })
}

/// Reads a factory entry from its XML form: an `<entry>` element with
/// `submit_attr` and `attr` descendants. Names compare case-insensitively and
/// values are trimmed.
pub fn parse_factory_entry_xml(text: &str) -> Result<FactoryEntry, IngestError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| IngestError::Xml(e.to_string()))?;
    let entry = doc
        .descendants()
        .find(|n| n.has_tag_name("entry"))
        .ok_or(IngestError::NoEntry)?;
    let entry_attr = |key: &str| entry.attribute(key).map(|v| v.trim().to_string());

    let name = entry_attr("name")
        .filter(|s| !s.is_empty())
        .ok_or(IngestError::Missing("name"))?;
    let gatekeeper = entry_attr("gatekeeper")
        .filter(|s| !s.is_empty())
        .ok_or(IngestError::Missing("gatekeeper"))?;
    let gridtype = entry_attr("gridtype").unwrap_or_else(|| "condor".to_string());
    let auth_method = entry_attr("auth_method");

    let pairs = |tag: &str| -> Vec<(String, String)> {
        entry
            .descendants()
            .filter(|n| n.has_tag_name(tag))
            .filter_map(|n| {
                let key = n
                    .attribute("name")?
                    .trim()
                    .trim_start_matches('+')
                    .to_ascii_lowercase();
                Some((key, n.attribute("value").unwrap_or("").trim().to_string()))
            })
            .collect()
    };
    let submit = pairs("submit_attr");
    let attrs = pairs("attr");
    let lookup = |list: &[(String, String)], key: &str| {
        let key = key.to_ascii_lowercase();
        list.iter()
            .rev()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.clone())
    };

    let cms_site = lookup(&attrs, "GLIDEIN_CMSSite")
        .filter(|s| !s.is_empty())
        .ok_or(IngestError::Missing("GLIDEIN_CMSSite"))?;
    let glidein_cpus: u32 = number(
        "GLIDEIN_CPUS",
        &lookup(&attrs, "GLIDEIN_CPUS").ok_or(IngestError::Missing("GLIDEIN_CPUS"))?,
    )?;
    let glidein_max_mem_mbs = match lookup(&attrs, "GLIDEIN_MaxMemMBs") {
        Some(v) => number("GLIDEIN_MaxMemMBs", &v)?,
        None => MegaBytes::from(glidein_cpus) * DEFAULT_MEM_PER_CORE_MB,
    };
    let glidein_max_walltime_secs = match lookup(&attrs, "GLIDEIN_Max_Walltime") {
        Some(v) => number::<Seconds>("GLIDEIN_Max_Walltime", &v)? * WALLTIME_UNIT_SECS,
        None => DEFAULT_MAX_WALLTIME_SECS,
    };
    let resource_slots = lookup(&attrs, "GLIDEIN_Resource_Slots")
        .map(|v| parse_resource_slots(&v))
        .transpose()?;
    let arch = match lookup(&attrs, "GLIDEIN_Arch") {
        Some(v) => Arch::parse(&v).ok_or_else(|| IngestError::Invalid {
            field: "GLIDEIN_Arch".into(),
            value: v.clone(),
            reason: "expected x86_64, ppc64le or aarch64".into(),
        })?,
        None => Arch::X86_64,
    };

    let submit_attrs = SubmitAttrs {
        max_memory: match lookup(&submit, "maxMemory") {
            Some(v) => number("maxMemory", &v)?,
            None => glidein_max_mem_mbs,
        },
        xcount: match lookup(&submit, "xcount") {
            Some(v) => number("xcount", &v)?,
            None => glidein_cpus,
        },
        request_gpus: match lookup(&submit, "Request_GPUs") {
            Some(v) => number("Request_GPUs", &v)?,
            None => 0,
        },
    };

    let entry = FactoryEntry {
        name,
        gatekeeper,
        gridtype,
        auth_method,
        cms_site,
        submit_attrs,
        glidein_cpus,
        glidein_max_mem_mbs,
        glidein_max_walltime_secs,
        resource_slots,
        arch,
    };
    if let Some(v) = entry.validate("entry").into_iter().next() {
        return Err(IngestError::Invalid {
            field: v.path,
            value: String::new(),
            reason: v.message,
        });
    }
    Ok(entry)
}

/// First-stage compatibility: can a pilot of `entry` plausibly host `job`,
/// judged only on the entry's static description?
pub fn static_entry_compat(job: &JobAd, entry: &FactoryEntry) -> bool {
    let cpu_terms = job.arch_list.contains(&entry.arch)
        && job.max_wall_time_secs <= entry.glidein_max_walltime_secs
        && job.request_cpus <= entry.glidein_cpus
        && job.request_memory_mb <= entry.glidein_max_mem_mbs;
    match classify_gpu_use(job) {
        GpuUseClass::MustUseGPU => cpu_terms && entry.gpus_per_pilot() >= job.request_gpus,
        GpuUseClass::CanUseGPU | GpuUseClass::CpuOnly => cpu_terms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resource_slot_descriptors() {
        let rs = parse_resource_slots("GPUs,1,type=main").unwrap();
        assert_eq!(
            (rs.resource_name.as_str(), rs.count, rs.slot_type.as_str()),
            ("GPUs", 1, "main")
        );
        let rs = parse_resource_slots("GPUs,2,type=main").unwrap();
        assert_eq!(rs.count, 2);
        let rs = parse_resource_slots(" GPUs , 1,\n      type = main ").unwrap();
        assert_eq!(rs, parse_resource_slots("GPUs,1,type=main").unwrap());
        assert!(parse_resource_slots("GPUs,one,type=main").is_err());
        assert!(parse_resource_slots("GPUs,1").is_err());
        assert!(parse_resource_slots("GPUs,1,type=main,extra").is_err());
        assert!(parse_resource_slots("GPUs,-1,type=main").is_err());
        assert!(parse_resource_slots("GPUs,1,kind=main").is_err());
    }

    #[test]
    fn unclosed_entry_is_rejected() {
        assert!(matches!(
            parse_factory_entry_xml("<entry name=\"x\">"),
            Err(IngestError::Xml(_))
        ));
    }

    #[test]
    fn missing_fields_are_named() {
        let base = |entry_attrs: &str, attrs: &str| {
            format!("<entry {}><attrs>{}</attrs></entry>", entry_attrs, attrs)
        };
        let site = r#"<attr name="GLIDEIN_CMSSite" value="T2_X"/>"#;
        let cpus = r#"<attr name="GLIDEIN_CPUS" value="8"/>"#;
        let full = format!("{}{}", site, cpus);
        let cases = [
            (base(r#"gatekeeper="g""#, &full), "name"),
            (base(r#"name="e""#, &full), "gatekeeper"),
            (base(r#"name="e" gatekeeper="g""#, cpus), "GLIDEIN_CMSSite"),
            (base(r#"name="e" gatekeeper="g""#, site), "GLIDEIN_CPUS"),
        ];
        for (xml, field) in cases {
            match parse_factory_entry_xml(&xml) {
                Err(IngestError::Missing(f)) => assert_eq!(f, field),
                other => panic!("{}: {:?}", field, other),
            }
        }
        let ok = parse_factory_entry_xml(&base(r#"name="e" gatekeeper="g""#, &full)).unwrap();
        assert_eq!(ok.glidein_max_mem_mbs, 16000);
        assert_eq!(ok.submit_attrs.max_memory, 16000);
        assert_eq!(ok.submit_attrs.xcount, 8);
        assert_eq!(ok.glidein_max_walltime_secs, DEFAULT_MAX_WALLTIME_SECS);
        assert_eq!(ok.arch, Arch::X86_64);
    }

    #[test]
    fn bad_values_are_reported() {
        let xml = r#"<entry name="e" gatekeeper="g"><attrs>
            <attr name="GLIDEIN_CMSSite" value="T2_X"/>
            <attr name="GLIDEIN_CPUS" value="auto"/></attrs></entry>"#;
        assert!(matches!(
            parse_factory_entry_xml(xml),
            Err(IngestError::Invalid { ref field, .. }) if field == "GLIDEIN_CPUS"
        ));
        let xml = r#"<entry name="e" gatekeeper="g"><attrs>
            <attr name="GLIDEIN_CMSSite" value="T2_X"/>
            <attr name="GLIDEIN_CPUS" value="8"/>
            <attr name="GLIDEIN_Resource_Slots" value="GPUs,0,type=main"/></attrs></entry>"#;
        assert!(parse_factory_entry_xml(xml).is_err());
        let xml = r#"<entry name="e" gatekeeper="g"><attrs>
            <attr name="GLIDEIN_CMSSite" value="T2_X"/>
            <attr name="GLIDEIN_CPUS" value="0"/></attrs></entry>"#;
        assert!(parse_factory_entry_xml(xml).is_err());
        let xml = r#"<entry name="e" gatekeeper="g"><attrs>
            <attr name="GLIDEIN_CMSSite" value="T2_X"/>
            <attr name="GLIDEIN_CPUS" value="8"/>
            <attr name="glidein_arch" value="ppc64le"/></attrs></entry>"#;
        assert_eq!(parse_factory_entry_xml(xml).unwrap().arch, Arch::Ppc64le);
    }

    #[test]
    fn escaping_survives_round_trip() {
        let xml = r#"<entry name="a&amp;b" gatekeeper="h &quot;1&quot;"><attrs>
            <attr name="GLIDEIN_CMSSite" value="T2_&lt;X&gt;"/>
            <attr name="GLIDEIN_CPUS" value="4"/></attrs></entry>"#;
        let e = parse_factory_entry_xml(xml).unwrap();
        assert_eq!(e.name, "a&b");
        assert_eq!(parse_factory_entry_xml(&e.to_xml()).unwrap(), e);
    }
}
