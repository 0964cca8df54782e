"""Overfit the occupancy network to a single group of frames and watch the
estimated bitstream size fall, then show what warm-starting the next group
buys.

Run:  python3 demos/02_training_overfit.py
"""
from linr.pipeline import GopConfig, train_gop
from linr.plyio import generate_fixture

config = GopConfig(gop_size=2, seed=0)

# Group 1: two adjacent "frames" (the shell nudged by one voxel).
group1 = [generate_fixture("sphere-shell", 14, offset=k) for k in (0, 1)]
result = train_gop(group1, config, epochs=6)
print("group 1, random init, 6 epochs (one optimizer step per frame):")
for step, loss in enumerate(result.losses):
    marker = "#" * int(60 * loss / result.losses[0])
    print(f"  step {step + 1:2d}  {loss:9.1f} bits  {marker}")

# Group 2 continues the motion.  Warm-starting from group 1's parameters
# versus training from scratch:
group2 = [generate_fixture("sphere-shell", 14, offset=k) for k in (2, 3)]
warm = train_gop(group2, config, init=result.model.flatten(),
                 num_scales=result.num_scales, epochs=6)
cold = train_gop(group2, config, num_scales=result.num_scales, epochs=6)
print("\ngroup 2 loss after each step (same frames, two initializations):")
print(f"  {'step':>4}  {'warm start':>12}  {'random init':>12}")
for step, (w, c) in enumerate(zip(warm.losses, cold.losses)):
    print(f"  {step + 1:4d}  {w:12.1f}  {c:12.1f}")
target = result.losses[-1]
reach = next((k + 1 for k, v in enumerate(warm.losses) if v <= target), None)
print(f"\nwarm start reaches group 1's final loss ({target:.0f} bits) "
      f"after {reach} step(s); the random run is still far above it.")
