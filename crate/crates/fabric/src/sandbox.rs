//! Worker process launch: cleared environment, per-tag working directory,
//! resource limits and parent-death signal.
//!
//! This is directory and resource confinement only; it does not isolate the
//! filesystem or network.

use std::io;
use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};

use fabric_core::lifecycle::ErrorKind;

use crate::config::SandboxSpec;

/// Variables passed through from the manager even when not listed.
pub const DEFAULT_ENV_ALLOW: &[&str] = &["PATH", "LANG", "RUST_BACKTRACE", "RUST_LOG"];

/// Fully resolved launch parameters for one worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Launch {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    pub cwd: PathBuf,
    pub cpu_seconds: Option<u64>,
    pub memory_bytes: Option<u64>,
}

impl Launch {
    pub fn resolve(spec: &SandboxSpec, worker_bin: &Path, tag: &str, sandbox_root: &Path) -> Launch {
        let cwd = spec.cwd.clone().unwrap_or_else(|| sandbox_root.join(sanitize(tag)));
        let expand = |s: &str| s.replace("{worker}", &worker_bin.to_string_lossy()).replace("{tag}", tag);
        let (program, args) = match spec.command.split_first() {
            Some((p, rest)) => (PathBuf::from(expand(p)), rest.iter().map(|a| expand(a)).collect()),
            None => (worker_bin.to_path_buf(), vec!["--tag".to_string(), tag.to_string()]),
        };
        let mut env: Vec<(String, String)> = Vec::new();
        let allowed = DEFAULT_ENV_ALLOW.iter().copied().chain(spec.env_allow.iter().map(String::as_str));
        for name in allowed {
            if let Ok(v) = std::env::var(name) {
                env.retain(|(k, _)| k != name);
                env.push((name.to_string(), v));
            }
        }
        for (k, v) in &spec.env {
            env.retain(|(name, _)| name != k);
            env.push((k.clone(), v.clone()));
        }
        let dir = cwd.to_string_lossy().into_owned();
        for k in ["HOME", "TMPDIR"] {
            if !spec.env.contains_key(k) {
                env.retain(|(name, _)| name != k);
                env.push((k.to_string(), dir.clone()));
            }
        }
        Launch {
            program,
            args,
            env,
            cwd,
            cpu_seconds: spec.cpu_seconds,
            memory_bytes: spec.memory_bytes,
        }
    }

    /// Creates the working directory and spawns the process with piped
    /// stdin and stdout.
    pub fn spawn(&self) -> io::Result<tokio::process::Child> {
        std::fs::create_dir_all(&self.cwd)?;
        let mut cmd = tokio::process::Command::new(&self.program);
        cmd.args(&self.args)
            .env_clear()
            .envs(self.env.iter().map(|(k, v)| (k, v)))
            .current_dir(&self.cwd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true);
        let cpu = self.cpu_seconds;
        let mem = self.memory_bytes;
        // SAFETY: the closure only makes async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(move || {
                if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL as libc::c_ulong, 0, 0, 0) != 0 {
                    return Err(io::Error::last_os_error());
                }
                if let Some(s) = cpu {
                    // the hard limit sits one second above so SIGXCPU arrives first
                    set_limit(libc::RLIMIT_CPU, s, s.saturating_add(1))?;
                }
                if let Some(b) = mem {
                    set_limit(libc::RLIMIT_AS, b, b)?;
                }
                Ok(())
            });
        }
        cmd.spawn()
    }
}

fn set_limit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    // SAFETY: plain syscall on a stack value.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Keeps a tag usable as a single path component.
fn sanitize(tag: &str) -> String {
    let s: String = tag
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "_".to_string()
    } else {
        s
    }
}

/// Signals that mean the worker hit a sandbox limit or crashed on its own.
const VIOLATION_SIGNALS: &[i32] = &[libc::SIGXCPU, libc::SIGSEGV, libc::SIGABRT, libc::SIGBUS, libc::SIGXFSZ];

/// How a worker that died mid-task is reported.
pub fn classify_exit(status: Option<ExitStatus>) -> ErrorKind {
    use std::os::unix::process::ExitStatusExt;
    match status.and_then(|s| s.signal()) {
        Some(sig) if VIOLATION_SIGNALS.contains(&sig) => ErrorKind::SandboxViolation,
        _ => ErrorKind::Lost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn default_launch_uses_worker_and_tag_dir() {
        let l = Launch::resolve(&SandboxSpec::default(), Path::new("/bin/worker"), "gpu", Path::new("/sb"));
        assert_eq!(l.program, PathBuf::from("/bin/worker"));
        assert_eq!(l.args, vec!["--tag", "gpu"]);
        assert_eq!(l.cwd, PathBuf::from("/sb/gpu"));
        assert!(l.env.contains(&("HOME".into(), "/sb/gpu".into())));
    }

    #[test]
    fn template_and_env_overrides() {
        let spec = SandboxSpec {
            env: BTreeMap::from([("A".to_string(), "1".to_string()), ("HOME".to_string(), "/h".to_string())]),
            command: vec!["/usr/bin/env".into(), "{worker}".into(), "--tag={tag}".into()],
            ..Default::default()
        };
        let l = Launch::resolve(&spec, Path::new("/w"), "t", Path::new("/sb"));
        assert_eq!(l.program, PathBuf::from("/usr/bin/env"));
        assert_eq!(l.args, vec!["/w", "--tag=t"]);
        assert!(l.env.contains(&("A".into(), "1".into())));
        assert!(l.env.contains(&("HOME".into(), "/h".into())));
        assert!(l.env.contains(&("TMPDIR".into(), "/sb/t".into())));
    }

    #[test]
    fn unsafe_tags_stay_inside_the_root() {
        let l = Launch::resolve(&SandboxSpec::default(), Path::new("/w"), "../etc", Path::new("/sb"));
        assert_eq!(l.cwd, PathBuf::from("/sb/.._etc"));
        let l = Launch::resolve(&SandboxSpec::default(), Path::new("/w"), "..", Path::new("/sb"));
        assert_eq!(l.cwd, PathBuf::from("/sb/_"));
    }

    #[test]
    fn exit_classification() {
        use std::os::unix::process::ExitStatusExt;
        assert_eq!(classify_exit(Some(ExitStatus::from_raw(libc::SIGXCPU))), ErrorKind::SandboxViolation);
        assert_eq!(classify_exit(Some(ExitStatus::from_raw(libc::SIGKILL))), ErrorKind::Lost);
        assert_eq!(classify_exit(Some(ExitStatus::from_raw(0))), ErrorKind::Lost);
        assert_eq!(classify_exit(None), ErrorKind::Lost);
    }

    #[tokio::test]
    async fn env_is_cleared_and_cwd_set() {
        let root = tempfile::tempdir().unwrap();
        let spec = SandboxSpec {
            command: vec!["/bin/sh".into(), "-c".into(), "pwd; echo \"$SECRET_X\"".into()],
            ..Default::default()
        };
        std::env::set_var("SECRET_X", "leak");
        let l = Launch::resolve(&spec, Path::new("/w"), "t", root.path());
        let out = l.spawn().unwrap().wait_with_output().await.unwrap();
        let text = String::from_utf8(out.stdout).unwrap();
        let mut lines = text.lines();
        assert_eq!(Path::new(lines.next().unwrap()), root.path().join("t").canonicalize().unwrap());
        assert_eq!(lines.next().unwrap(), "");
    }

    #[tokio::test]
    async fn cpu_limit_kills_with_sigxcpu() {
        let root = tempfile::tempdir().unwrap();
        let spec = SandboxSpec {
            command: vec!["/bin/sh".into(), "-c".into(), "while :; do :; done".into()],
            cpu_seconds: Some(1),
            ..Default::default()
        };
        let l = Launch::resolve(&spec, Path::new("/w"), "t", root.path());
        let status = l.spawn().unwrap().wait().await.unwrap();
        assert_eq!(classify_exit(Some(status)), ErrorKind::SandboxViolation);
    }
}
