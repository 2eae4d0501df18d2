"""
This example script runs the whole toy pipeline in memory:
- bouncing-shapes sequences are rendered for training and for held-out evaluation
- a toy-sized network is trained on windows of 10 frames
- next-frame predictions are scored against the copy-last-frame baseline
- a closed-loop rollout predicts 5 frames ahead, optionally written out as P6 frames

To run a short training:
  python demo.py --epochs 10

To keep the rollout frames:
  python demo.py --epochs 10 --out-dir demo_frames
"""
import os
from argparse import ArgumentParser

from precoder.data import SyntheticSpec, generate_synthetic, stack_windows
from precoder.evaluation import evaluate_next_frame, evaluate_rollout
from precoder.io import save_frames
from precoder.precnet import NetworkConfig, build_variant, count_parameters
from precoder.training import TrainConfig, train
from precoder.util import configure_logging

parser = ArgumentParser()
parser.add_argument("--epochs", type=int, default=10)
parser.add_argument("--preset", type=str, default="toy")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out-dir", type=str, default=None)
parser.add_argument("--debug", "-d", action="store_true")
args = parser.parse_args()
configure_logging(debug=args.debug)

train_set = generate_synthetic(SyntheticSpec(seed=args.seed), n_sequences=40, length=20)
held_out = generate_synthetic(SyntheticSpec(seed=args.seed + 1), n_sequences=10, length=22)

network = NetworkConfig.from_preset(args.preset)
print(f"{args.preset} network with {count_parameters(network):,} parameters")
weights = build_variant(network, seed=args.seed)
config = TrainConfig(epochs=args.epochs, sequences_per_epoch=100, validation_sequences=20)
windows = stack_windows(train_set, config.sequence_length, stride=1)
validation = stack_windows(held_out, config.sequence_length, stride=config.sequence_length)
result = train(weights, windows, config, validation=validation, progress=True)

next_frame = evaluate_next_frame(weights, held_out)
print("model:   ", next_frame.model.summary())
print("baseline:", next_frame.baseline.summary())

rollout = evaluate_rollout(weights, held_out, horizon=5, keep_predictions=bool(args.out_dir))
for horizon, frames, mse, psnr, ssim in rollout.rows():
    print(f"T={horizon}: MSE {mse:.5f}, PSNR {psnr:.2f} dB, SSIM {ssim:.3f}")
if args.out_dir:
    for index, frames in enumerate(rollout.predictions):
        save_frames(os.path.join(args.out_dir, f"window_{index:04d}"), frames)
    print(f"Wrote {len(rollout.predictions)} rollouts to {args.out_dir}")
if result.history:
    print(f"Final training loss {result.history[-1].train_loss:.5f}")
