#include "pyramidat/dataio.hpp"

namespace pyramidat {

template ImageBatch<float> augment<float>(const ImageBatch<float>&, std::uint64_t);
template ImageBatch<double> augment<double>(const ImageBatch<double>&, std::uint64_t);

}  // namespace pyramidat
