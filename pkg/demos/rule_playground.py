"""
Writing alert rules as expressions
==================================

The expression language covers the cases the built-in threshold does not:
one-sided triggers, combinations of conditions, or absolute floors.
"""

from datastringer.rules import eval_rule, parse_rule, print_rule

# one list of records per month, oldest first; only the row count matters here
months = [[{}] * 100] * 6 + [[{}] * 134]

rule = parse_rule("pct_change(count, 6) > 10 and count() >= 50")
print(print_rule(rule))  # fully parenthesised, parses back to the same tree

result = eval_rule(rule, months)
print("fired:", result.fired)
for metric, value in result.bindings.items():
    print(f"  {metric} = {value}")

# numeric fields work too; text that looks like a number is accepted.
# Window metrics look at the months before the latest one, summed per month,
# so mean(no2, 1) here is last-but-one month's total: 38.5 + 41.
readings = [[{"no2": "38.5"}, {"no2": "41"}], [{"no2": "55"}, {"no2": "61.5"}]]
print(eval_rule("max(no2) > 60 and mean(no2, 1) < 100", readings).bindings)
