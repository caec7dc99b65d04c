use pyo3::prelude::*;
use pyo3::types::PyDict;

use orthofactor_py::orthofactor_py;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(orthofactor_py);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python code failed");
        }
    });
}

#[test]
fn module_round_trip() {
    run(cr#"
import orthofactor_py as of

y, b0, omega0, support = of.simulate(g=60, n=10, k0=2, block_len=30, stride=25, seed=1)
assert len(y) == 60 and len(y[0]) == 10
assert len(b0[0]) == 2 and len(omega0) == 2

prior = of.Prior(60)
prior.lambda0 = 20.0
assert prior.lambda0 == 20.0
est = of.em_map(y, 2, prior=prior, max_iter=100)
assert len(est.b_hat) == 60 and est.iterations >= 1

s = of.Sampler("spsl_orthonormal", y, est, prior=prior, seed=3)
s.step(5)
assert s.sweeps == 5
assert of.orthonormality_defect(s.factors()) / 10 < 1e-8
a, b, c = s.conditional(0, 0)
assert a > 0 and c >= 0

for bad in ("nope", "spsl"):
    try:
        of.Sampler(bad, y, est)
    except ValueError:
        pass
    else:
        raise AssertionError("accepted " + bad)

try:
    of.sample_mixture(-1.0, 0.0, 0.0, 10, seed=0)
except ValueError:
    pass
else:
    raise AssertionError("negative a accepted")
"#);
}
