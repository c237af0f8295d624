# %% [markdown]
# # Confusion counts and report tables
#
# Predictions at or above the threshold count as positive. Accuracy is a
# percentage; precision and recall are fractions and become "n/a" when their
# denominator is empty.

# %%
from malariadx.metrics import (confusion, evaluate_predictions, format_report, parse_report,
                               reference_reports, to_csv)

probs = [0.9, 0.8, 0.5, 0.4, 0.2, 0.1]
labels = [1, 1, 0, 1, 0, 0]
print(confusion(probs, labels))
report = evaluate_predictions("toy", probs, labels)
print(report.rendered())

# %%
print(format_report(reference_reports()))
print(to_csv([report]))

# %%
table = format_report([report, evaluate_predictions("all negative", [0.1, 0.2], [0, 0])])
print(table)
print(parse_report(table)[1])
