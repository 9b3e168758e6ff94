"""Membership-inference privacy accounting and auditing for noisy SGD."""
