"""Refresh-crawl scheduling under noisy change-indicating signals."""
