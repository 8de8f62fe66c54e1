"""FBSDE / BSPDE numerics for utility maximisation with random endowment."""
