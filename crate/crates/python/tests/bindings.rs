use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let m = PyModule::new(py, "pymiselbo").unwrap();
        pymiselbo::pymiselbo(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("m", m).unwrap();
        py.run(code, Some(&globals), None)
            .inspect_err(|e| e.print(py))
            .unwrap();
    });
}

#[test]
fn estimators_on_a_shared_batch() {
    with_module(
        cr#"
import math
t = m.Target.setting("i")
e = m.Ensemble([("q1", [0.0], 1.0), ("q2", [100.0], 1.0)])
b = m.draw_batch(t, e, L=40, seed=3)
assert abs(b.delta(1) - math.log(2)) < 1e-6
assert b.delta(1) == b.jsd()
assert abs((b.kl_bar() - b.kl_mis()) - b.jsd()) < 1e-10
assert b.evaluate("elbo:q1", 1) == b.elbo("q1")
assert b.labels == ["q1", "q2"] and b.L == 40
"#,
    );
}

#[test]
fn errors_become_value_errors() {
    with_module(
        cr#"
for bad in (lambda: m.Target.setting("iv"),
            lambda: m.Ensemble([("a", [0.0], -1.0)]),
            lambda: m.draw_batch(m.Target.setting("p1"), m.Ensemble([("a", [0.0], 1.0)]), L=5)):
    try:
        bad()
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
"#,
    );
}

#[test]
fn fit_estimate_and_round_trip() {
    with_module(
        cr#"
t = m.Target.mixture([[2.0]], [1.0])
fitted, traces = m.fit(t, m.Ensemble([("q", [0.0], 1.0)]), iterations=400, samples_per_iter=50, lr=0.05)
assert abs(fitted.means()["q"][0] - 2.0) < 0.2
assert len(traces["q"]) == 400
same = m.Ensemble.from_json(fitted.to_json())
est = m.estimate(t, same, ["elbo:q", "miselbo"], L=200, replicates=4)
mean, se, vals = est["miselbo"]
assert len(vals) == 4 and mean <= 3 * se + 1e-9
h = m.Ensemble.hierarchical([("a", 10.0, 1.0, 1.0), ("b", 10.0, 4.0, 1.0)])
assert h.dim == 2 and len(h) == 2
"#,
    );
}
