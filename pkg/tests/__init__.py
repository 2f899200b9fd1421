"""Tests suite for `lasalt`."""
