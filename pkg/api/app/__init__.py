# DCGMM package
