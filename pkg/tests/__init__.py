"""
Testes do MAT-SEI
"""
