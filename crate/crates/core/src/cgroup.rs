//! cgroup-v2 file contents for schedule assignments.
//!
//! The formatters are always available. Writing to a real cgroup hierarchy
//! needs the `cgroup` feature.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backend::BackendError;
use crate::controller::{Allocations, ModuleId, ScheduleAssignment, SchedulerMode};

/// Bandwidth period written to `cpu.max`, in microseconds.
pub const CFS_PERIOD_US: u64 = 100_000;
pub const CPU_MAX_FILE: &str = "cpu.max";
pub const RT_RUNTIME_FILE: &str = "cpu.rt_runtime_us";

/// `cpu.max` content for a share of `cores` CPUs: quota then period.
pub fn format_cpu_max(cores: f64) -> String {
    let quota = (cores * CFS_PERIOD_US as f64).round().max(0.0) as u64;
    format!("{quota} {CFS_PERIOD_US}")
}

/// RT runtime file content for a slice of `slice_us` microseconds.
pub fn format_rt_runtime(slice_us: u64) -> String {
    slice_us.to_string()
}

/// File name and content per module for one assignment.
pub fn render(assignment: &ScheduleAssignment) -> BTreeMap<ModuleId, (&'static str, String)> {
    match &assignment.allocations {
        Allocations::Cfs { shares } => shares
            .iter()
            .map(|(m, &s)| (m.clone(), (CPU_MAX_FILE, format_cpu_max(s))))
            .collect(),
        Allocations::Rt { slices, .. } => slices
            .iter()
            .map(|(m, &t)| (m.clone(), (RT_RUNTIME_FILE, format_rt_runtime(t))))
            .collect(),
    }
}

/// One cgroup directory per module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CgroupTarget {
    pub mode: SchedulerMode,
    pub paths: BTreeMap<ModuleId, PathBuf>,
}

impl CgroupTarget {
    /// Expects the module cgroups at `root/<module id>`.
    pub fn under(root: impl AsRef<Path>, modules: &[ModuleId], mode: SchedulerMode) -> Self {
        let root = root.as_ref();
        CgroupTarget {
            mode,
            paths: modules.iter().map(|m| (m.clone(), root.join(m.as_str()))).collect(),
        }
    }

    fn file_name(&self) -> &'static str {
        match self.mode {
            SchedulerMode::Cfs => CPU_MAX_FILE,
            SchedulerMode::Rt => RT_RUNTIME_FILE,
        }
    }

    /// Checks that every module's control file exists. A missing `cpu.max`
    /// means the kernel lacks CFS bandwidth control.
    pub fn check(&self) -> Result<(), BackendError> {
        for dir in self.paths.values() {
            if !dir.is_dir() {
                return Err(BackendError::Io {
                    path: dir.display().to_string(),
                    code: Some(2),
                    message: "cgroup directory does not exist".into(),
                });
            }
            let file = dir.join(self.file_name());
            if !file.exists() {
                let what = match self.mode {
                    SchedulerMode::Cfs => "CFS bandwidth control",
                    SchedulerMode::Rt => "RT group scheduling",
                };
                return Err(BackendError::Capability(format!("{what} ({} is missing)", file.display())));
            }
        }
        Ok(())
    }
}

#[cfg(feature = "cgroup")]
mod writer {
    use super::*;
    use crate::backend::Backend;
    use crate::reactive::Micros;

    fn io_error(path: &Path, e: std::io::Error) -> BackendError {
        let path = path.display().to_string();
        match e.kind() {
            std::io::ErrorKind::PermissionDenied => BackendError::PermissionDenied { path },
            _ => BackendError::Io {
                path,
                code: e.raw_os_error(),
                message: e.to_string(),
            },
        }
    }

    /// Writes every module's control file for `assignment`.
    pub fn write_cgroup(assignment: &ScheduleAssignment, target: &CgroupTarget) -> Result<(), BackendError> {
        if assignment.mode() != target.mode {
            return Err(BackendError::ModeMismatch {
                expected: target.mode,
                got: assignment.mode(),
            });
        }
        target.check()?;
        for (module, (file, content)) in render(assignment) {
            let dir = target.paths.get(&module).ok_or_else(|| BackendError::UnknownModule(module.clone()))?;
            let path = dir.join(file);
            std::fs::write(&path, content).map_err(|e| io_error(&path, e))?;
        }
        Ok(())
    }

    /// A [`Backend`] that writes assignments to cgroup files in epoch order.
    #[derive(Debug)]
    pub struct CgroupWriter {
        target: CgroupTarget,
        last_epoch: Option<u64>,
    }

    impl CgroupWriter {
        pub fn new(target: CgroupTarget) -> Result<Self, BackendError> {
            target.check()?;
            Ok(CgroupWriter { target, last_epoch: None })
        }
    }

    impl Backend for CgroupWriter {
        fn apply(&mut self, _at: Micros, assignment: &ScheduleAssignment) -> Result<(), BackendError> {
            if let Some(last) = self.last_epoch {
                if assignment.epoch <= last {
                    return Err(BackendError::StaleEpoch {
                        last,
                        got: assignment.epoch,
                    });
                }
            }
            write_cgroup(assignment, &self.target)?;
            self.last_epoch = Some(assignment.epoch);
            Ok(())
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;
        use crate::controller::{compute_cfs_shares, compute_rt_slices};

        fn fake_tree(modules: &[&str], file: &str) -> tempfile::TempDir {
            let dir = tempfile::tempdir().unwrap();
            for m in modules {
                std::fs::create_dir(dir.path().join(m)).unwrap();
                std::fs::write(dir.path().join(m).join(file), "max 100000").unwrap();
            }
            dir
        }

        #[test]
        fn writes_cpu_max_per_module() {
            let dir = fake_tree(&["slam", "speech"], CPU_MAX_FILE);
            let modules = ["slam".into(), "speech".into()];
            let mut w = CgroupWriter::new(CgroupTarget::under(dir.path(), &modules, SchedulerMode::Cfs)).unwrap();
            let scores = [("slam".into(), 3.0), ("speech".into(), 1.0)].into_iter().collect();
            let a = compute_cfs_shares(&scores, 2).unwrap();
            w.apply(0, &a).unwrap();
            let read = |m: &str| std::fs::read_to_string(dir.path().join(m).join(CPU_MAX_FILE)).unwrap();
            assert_eq!(read("slam"), "150000 100000");
            assert_eq!(read("speech"), "50000 100000");
            assert!(matches!(w.apply(0, &a), Err(BackendError::StaleEpoch { .. })));
        }

        #[test]
        fn writes_rt_runtime() {
            let dir = fake_tree(&["a"], RT_RUNTIME_FILE);
            let target = CgroupTarget::under(dir.path(), &["a".into()], SchedulerMode::Rt);
            let scores = [("a".into(), 1.0)].into_iter().collect();
            write_cgroup(&compute_rt_slices(&scores, 250_000).unwrap(), &target).unwrap();
            assert_eq!(std::fs::read_to_string(dir.path().join("a").join(RT_RUNTIME_FILE)).unwrap(), "250000");
        }

        #[test]
        fn missing_bandwidth_control_is_a_capability_error() {
            let dir = fake_tree(&["a"], "cpu.weight");
            let target = CgroupTarget::under(dir.path(), &["a".into()], SchedulerMode::Cfs);
            assert!(matches!(CgroupWriter::new(target), Err(BackendError::Capability(_))));
        }
    }
}

#[cfg(feature = "cgroup")]
pub use writer::{write_cgroup, CgroupWriter};
