"""The curriculum schedule, the hybrid loss, and the refinement reward.

Three small moving parts combine into the training objective:

* f(e, T) = (1 - e/T)^2 decays the supervised weight over training;
* L = f * L_seg + (1 - f) * L_RL blends segmentation and policy losses;
* the policy earns the change in mean Dice caused by its chosen residual
  scale, judged after hardening the logits to labels.

Run from the repository root:  python3 demos/04_curriculum_and_rewards.py
"""

import numpy as np

from segrl.losses import curriculum_factor, total_loss
from segrl.refine import (
    ActionSpace,
    BaselineState,
    compute_reward,
    policy_loss,
    refine,
    update_baseline,
)

T = 30
print("curriculum factor over a 30-epoch run:")
marks = [0, 1, 5, 10, 15, 20, 25, 29]
print("  epoch " + "  ".join(f"{e:>5d}" for e in marks))
print("  f     " + "  ".join(f"{curriculum_factor(e, T):>5.3f}" for e in marks))

l_seg, l_rl = 0.9, 0.2
print(f"\nhybrid loss with L_seg={l_seg}, L_RL={l_rl}:")
for e in (0, 15, 29):
    f = curriculum_factor(e, T)
    print(f"  epoch {e:>2d}: f={f:.3f}  L={total_loss(l_seg, l_rl, f):.4f}")

# --- reward for one refinement step ---------------------------------------
# toy 2-class problem: unrefined logits miss part of the foreground; a
# residual nudged in the right direction flips those pixels
rng = np.random.default_rng(0)
gt = np.zeros((8, 8), dtype=np.int64)
gt[2:6, 2:6] = 1

z = np.zeros((2, 8, 8), dtype=np.float32)
z[0] = 0.5                      # background wins everywhere...
z[1, 2:6, 2:4] = 2.0            # ...except half of the true square

r = np.zeros_like(z)
r[1, 2:6, 4:6] = 30.0           # residual votes for the missing half

space = ActionSpace(alphas=(-0.1, 0.0, 0.1))
print("\naction sweep on the toy refinement:")
for alpha in space.alphas:
    refined = refine(z, alpha, r)
    reward = compute_reward(refined, z, gt)
    print(f"  alpha {alpha:+.1f}: reward {reward:+.4f}")

# the baseline is an exponential moving average of recent rewards; the
# policy loss scales the log-probability by the advantage against it
baseline = BaselineState(momentum=0.9)
for step, reward in enumerate((0.05, 0.08, 0.02, 0.10)):
    update_baseline(baseline, reward)
    print(f"step {step}: reward {reward:+.3f}  baseline {baseline.value:+.4f}  "
          f"policy loss {policy_loss(np.log(0.4), reward, baseline.value):+.4f}")
