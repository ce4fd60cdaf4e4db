"""Physician supply forecasting with a stock-flow-consistent cohort model.

Net exit rates are estimated from observed cohort shifts, entry parameters are
calibrated against historical stocks, and forecasts are compared with the
supply needed to keep physician density constant.
"""

__version__ = "0.1.0"
