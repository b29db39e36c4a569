# %% [markdown]
# # Gradient checks
#
# Autograd against central differences in double precision. Entries that sit
# on a ReLU or max-pool switch are detected and skipped.

# %%
from covtanet import grad_check
from covtanet.gradcheck import CHECKS

for module in sorted(CHECKS):
    r = grad_check(module, seed=0)
    print(f"{module:10s} max rel error {r['max_error']:.2e}  tol {r['tolerance']:.0e}  "
          f"{'PASS' if r['passed'] else 'FAIL'}")
