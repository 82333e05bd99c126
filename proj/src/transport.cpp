namespace densteer {}
