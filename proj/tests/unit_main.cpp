#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "urbanfm/runtime.hpp"

int main(int argc, char** argv) {
    urbanfm::tune_process_for_compute(argv);
    return doctest::Context(argc, argv).run();
}
