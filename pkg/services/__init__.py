"""Services package: numerics, persistence and reporting"""
