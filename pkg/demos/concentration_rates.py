"""Measuring the rate at which empirical averages concentrate.

For each size N we run many independent trials and record how far the
squared error at iteration k lands from its limit. If the fluctuations are
of order 1/sqrt(N), the median deviation should fall on a line of slope
-1/2 in log-log coordinates. The trial count is kept small here so the
demo runs in about half a minute; the fitted slopes get sharper with more.
"""

from mpforge.harness import ModelConfig, run_trials, summarize, tail_estimate

model = ModelConfig()  # Gaussian prior, AWGN, unit singular values, delta = 1/2
records = run_trials(model, [128, 256, 512, 1024], trials=60, K=4, functionals=["squared_error"], seed=5)
summary = summarize(records)

for row in summary.rows:
    if row["k"] == 2:
        print(f"N={row['N']:>5}  median deviation at k=2: {row['median_dev']:.2e}")
for (k, name), slope in sorted(summary.slopes.items()):
    print(f"k={k}  fitted log-log slope for {name}: {slope:+.2f}")

tails = tail_estimate(records, 0.02)
print("tail frequency P(dev >= 0.02) grows with N somewhere:", not tails.monotone)
