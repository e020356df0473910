"""Gaussian beams, partial DtN maps and nonlinearity recovery for semilinear waves"""
