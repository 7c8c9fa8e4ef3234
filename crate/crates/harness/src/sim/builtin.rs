//! Scenarios shipped with the harness.

macro_rules! scenario {
    ($name:literal) => {
        ($name, include_str!(concat!("../../scenarios/", $name, ".scn")))
    };
}

pub const BUILTINS: &[(&str, &str)] = &[
    scenario!("nominal"),
    scenario!("ops-forward-jump"),
    scenario!("ops-backward-jump"),
    scenario!("ntp-single-liar"),
    scenario!("ntp-no-consensus"),
    scenario!("ntp-slew"),
    scenario!("downtime-catchup-3"),
    scenario!("downtime-catchup-10"),
    scenario!("downtime-catchup-11"),
    scenario!("crash-mid-issue"),
    scenario!("rollback"),
    scenario!("forward-accepted"),
    scenario!("exhaustion"),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
