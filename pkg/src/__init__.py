"""fear_bench: FEAR architecture evaluation workbench on a numpy training engine."""
