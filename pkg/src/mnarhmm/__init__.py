"""Hidden Markov models for time series with ignorable and non-ignorable missing data."""
