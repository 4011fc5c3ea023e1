use mstmax::config::{level_for, Config, ConfigError, ModeChoice};

const PAPER_SCHEDULE: &str = r#"
[problem]
example = "1"

[convergence]
mode = "sparse"
pairs = [["1/4", "1/4"], ["1/6", "1/8"], ["1/8", "1/12"], ["1/16", "1/32"]]
min_slope = 0.8
"#;

fn key_of(e: ConfigError) -> String {
    match e {
        ConfigError::Invalid { key, .. } => key,
        other => panic!("expected a key diagnostic, got {other}"),
    }
}

#[test]
fn schedule_maps_pairs_to_dyadic_levels() {
    let cfg = Config::parse(PAPER_SCHEDULE).unwrap();
    let s = cfg.convergence.as_ref().unwrap().schedule(1.0).unwrap();
    let levels: Vec<u32> = s.iter().map(|p| p.level).collect();
    assert_eq!(levels, [2, 3, 4, 5]);
    let steps: Vec<usize> = s.iter().map(|p| p.steps).collect();
    assert_eq!(steps, [4, 6, 8, 16]);
    assert!(s[2].dyadic_substitution());
    assert!(s.iter().enumerate().all(|(i, p)| p.dyadic_substitution() == (i == 2)));
    assert!(s.iter().all(|p| !p.dt_adjusted()));
    assert_eq!(level_for(1.0 / 12.0), 4);
}

#[test]
fn dt_is_rounded_to_divide_the_final_time() {
    let text = PAPER_SCHEDULE.replace("[\"1/6\", \"1/8\"]", "[\"0.3\", \"1/8\"]");
    let cfg = Config::parse(&text).unwrap();
    let s = cfg.convergence.as_ref().unwrap().schedule(1.0).unwrap();
    assert_eq!(s[1].steps, 3);
    assert!((s[1].dt - 1.0 / 3.0).abs() < 1e-15);
    assert!(s[1].dt_adjusted());
}

#[test]
fn round_trip_is_identity() {
    let texts = [
        PAPER_SCHEDULE.to_string(),
        r#"
seed = 7
wall_time = false
out = "x.csv"
[problem]
example = "custom"
t_final = "1/2"
a = [["1 + x1", "1/(1 + cos(2*pi*y1)^2)"], ["0.5", "1"]]
b = [["1", "2 + sin(2*pi*y2)"]]
f = ["t*x2", "0"]
g1 = ["x2*(1-x2)", "x1*(1-x1)"]
a0 = "1"
[solver]
tol = 1e-12
kind = "dense"
[cell]
levels = [2, 3]
grid = 2
[corrector]
level = 3
dt = "1/8"
eps = ["1/4"]
fine_level = 5
[reference]
eps = "1/4"
level = 4
dt = "1/8"
steps = 3
checkpoint = "c.txt"
"#
        .to_string(),
    ];
    for t in texts {
        let a = Config::parse(&t).unwrap();
        let s = a.to_toml();
        let b = Config::parse(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, b.to_toml());
    }
}

#[test]
fn defaults_are_filled_in() {
    let cfg = Config::parse("[problem]\nexample = \"2\"\n").unwrap();
    assert_eq!(cfg.solver.tol, 1e-11);
    assert!(cfg.wall_time);
    assert_eq!(cfg.t_final().unwrap(), 1.0);
    let conv = Config::parse(PAPER_SCHEDULE).unwrap().convergence.unwrap();
    assert_eq!(conv.mode, ModeChoice::Sparse);
}

#[test]
fn diagnostics_name_the_offending_key() {
    let cases = [
        ("[problem]\nexample = \"3\"\n", "problem.example"),
        ("[problem]\nexample = \"1\"\nt_final = \"-1\"\n", "problem.t_final"),
        ("[problem]\nexample = \"1\"\n[solver]\nkind = \"gmres\"\n", "solver.kind"),
        ("[problem]\nexample = \"1\"\na = [[\"1\", \"1\"]]\n", "problem"),
        ("[problem]\nexample = \"custom\"\nb = [[\"1\", \"1\"]]\n", "problem.a"),
        ("[problem]\nexample = \"custom\"\na = [[\"y1\", \"1\"]]\nb = [[\"1\", \"1\"]]\n", "problem.a[0][0]"),
        ("[problem]\nexample = \"custom\"\na = [[\"1\", \"x1\"]]\nb = [[\"1\", \"1\"]]\n", "problem.a[0][1]"),
        ("[problem]\nexample = \"custom\"\na = [[\"1\", \"exp(y1)\"]]\nb = [[\"1\", \"1\"]]\n", "problem.a[0][1]"),
        ("[problem]\nexample = \"custom\"\na = [[\"x1 - 0.5\", \"1\"]]\nb = [[\"1\", \"1\"]]\n", "problem.a"),
        ("[problem]\nexample = \"custom\"\na = [[\"1\", \"1\"]]\nb = [[\"1\", \"1\"]]\ng0 = [\"t\", \"0\"]\n", "problem.g0[0]"),
        ("[problem]\nexample = \"1\"\n[convergence]\npairs = [[\"1/4\", \"0\"]]\n", "convergence.pairs[0][1]"),
        ("[problem]\nexample = \"1\"\n[convergence]\npairs = [[\"1/4\", \"1/8\"], [\"1/4\", \"1/4\"]]\n", "convergence"),
        ("[problem]\nexample = \"1\"\n[convergence]\nlevels = [1, 2]\n", "convergence.dt_factor"),
        ("[problem]\nexample = \"1\"\n[cell]\nlevels = [4, 3]\n", "cell.levels"),
        (
            "[problem]\nexample = \"1\"\n[corrector]\nlevel = 2\ndt = \"1/4\"\neps = [\"1/3\"]\nfine_level = 5\n",
            "corrector.eps[0]",
        ),
        (
            "[problem]\nexample = \"1\"\n[corrector]\nlevel = 2\ndt = \"1/4\"\neps = [\"1/4\"]\nfine_level = 9\nmax_fine_level = 8\n",
            "corrector.fine_level",
        ),
        ("[problem]\nexample = \"1\"\n[reference]\neps = \"1/4\"\nlevel = 10\ndt = \"1/4\"\n", "reference.level"),
    ];
    for (text, key) in cases {
        let e = Config::parse(text).expect_err(text);
        assert_eq!(key_of(e), key, "for {text}");
    }
}

#[test]
fn syntax_errors_carry_line_numbers() {
    let e = Config::parse("[problem]\nexample = \"1\"\nbogus = 3\n").unwrap_err();
    let msg = e.to_string();
    assert!(matches!(e, ConfigError::Syntax(_)));
    assert!(msg.contains("line 3") && msg.contains("bogus"), "{msg}");
    let e = Config::parse("[problem\n").unwrap_err();
    assert!(e.to_string().contains("line 1"), "{e}");
}

#[test]
fn custom_problem_is_built() {
    let cfg = Config::parse(
        "[problem]\nexample = \"custom\"\na = [[\"1 + x1\", \"2\"]]\nb = [[\"1\", \"1\"], [\"x2\", \"y1\"]]\nf = [\"t\", \"x1\"]\n",
    )
    .unwrap();
    let bp = cfg.problem.build().unwrap();
    assert!(bp.exact.is_none());
    assert_eq!(bp.problem.a.eval([0.5, 0.0], [0.3, 0.3]), 3.0);
    assert_eq!(bp.problem.b.eval([0.0, 0.5], [0.5, 0.0]), 1.25);
    assert_eq!((bp.problem.f)(2.0, [0.25, 0.0]), [2.0, 0.25]);
    assert_eq!((bp.problem.g0)([0.3, 0.3]), [0.0, 0.0]);
}
