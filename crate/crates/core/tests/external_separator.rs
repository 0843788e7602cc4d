#![cfg(unix)]

use std::time::{Duration, Instant};

use capaug::separation::{separate, SeparationError, Separator, SeparatorSpec};
use capaug::signal::Waveform;

fn mixture() -> Waveform {
    // f32-exact samples, since mixtures reach the command as Float32 WAV
    Waveform::new((0..4000).map(|i| ((i as f64) * 0.01).sin() as f32 as f64 * 0.5).collect(), 16_000).unwrap()
}

#[test]
fn copying_script_returns_the_mixture() {
    let spec = SeparatorSpec::external(r#"sh -c 'test -n "$1" && cp "$0" "$2"' {MIXTURE} {CAPTION} {OUT}"#);
    let m = mixture();
    let est = separate(&spec, &m, "a dog's bark; echo pwned", None).unwrap();
    assert_eq!(est, m);
}

#[test]
fn caption_reaches_the_command_as_one_argument() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("caption.txt");
    let template = format!(
        r#"sh -c 'printf %s "$1" > "$3"; cp "$0" "$2"' {{MIXTURE}} {{CAPTION}} {{OUT}} {}"#,
        log.display()
    );
    let caption = "rain on a roof; \"quoted\" $HOME";
    separate(&SeparatorSpec::external(template), &mixture(), caption, None).unwrap();
    assert_eq!(std::fs::read_to_string(log).unwrap(), caption);
}

#[test]
fn nonzero_exit_carries_stderr() {
    let spec = SeparatorSpec::external(r#"sh -c 'echo model exploded >&2; exit 3' {MIXTURE} {CAPTION} {OUT}"#);
    match separate(&spec, &mixture(), "x", None) {
        Err(SeparationError::ExitStatus { stderr, .. }) => assert!(stderr.contains("model exploded")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_output_is_an_error() {
    let spec = SeparatorSpec::external("true {MIXTURE} {CAPTION} {OUT}");
    assert!(separate(&spec, &mixture(), "x", None).is_err());
}

#[test]
fn slow_commands_time_out() {
    let spec = SeparatorSpec::External {
        command_template: r#"sh -c 'sleep 30' {MIXTURE} {CAPTION} {OUT}"#.into(),
        timeout_secs: 1,
    };
    let started = Instant::now();
    match Separator::new(spec).unwrap().separate(&mixture(), "x", None) {
        Err(SeparationError::Timeout(d)) => assert_eq!(d, Duration::from_secs(1)),
        other => panic!("{other:?}"),
    }
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn unknown_program_fails_to_spawn() {
    let spec = SeparatorSpec::external("/nonexistent/capaug-separator {MIXTURE} {CAPTION} {OUT}");
    assert!(matches!(separate(&spec, &mixture(), "x", None), Err(SeparationError::Spawn { .. })));
}
