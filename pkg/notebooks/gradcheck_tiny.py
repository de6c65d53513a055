"""Finite-difference check of every parameter gradient of the joint loss on the tiny network."""
from rdcr.gradcheck import run_gradcheck, tiny_problem

report = run_gradcheck(tiny_problem(seed=0))
for t in report.tensors:
    print(f"{t.name:24s} max rel err {t.max_error:.2e}")
print(f"checked {report.checked} entries, refined {report.refined}, worst {report.worst:.2e}, "
      f"{'PASS' if report.passed else 'FAIL'}")
