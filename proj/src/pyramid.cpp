#include "pyramidat/pyramid.hpp"

namespace pyramidat {

template PerturbationPyramid<float> init_pyramid<float>(const PyramidSpec&, int,
                                                        const ImageShape&);
template PerturbationPyramid<double> init_pyramid<double>(const PyramidSpec&, int,
                                                          const ImageShape&);
template Tensor<float> expand_pyramid<float>(const PerturbationPyramid<float>&,
                                             const PyramidSpec&, int, const ImageShape&);
template Tensor<double> expand_pyramid<double>(const PerturbationPyramid<double>&,
                                               const PyramidSpec&, int, const ImageShape&);
template PerturbationPyramid<float> expand_pyramid_backward<float>(
    const Tensor<float>&, const PerturbationPyramid<float>&, const PyramidSpec&, int,
    const ImageShape&);
template PerturbationPyramid<double> expand_pyramid_backward<double>(
    const Tensor<double>&, const PerturbationPyramid<double>&, const PyramidSpec&, int,
    const ImageShape&);
template ImageBatch<float> apply_pyramid<float>(const ImageBatch<float>&,
                                                const PerturbationPyramid<float>&,
                                                const PyramidSpec&);
template ImageBatch<double> apply_pyramid<double>(const ImageBatch<double>&,
                                                  const PerturbationPyramid<double>&,
                                                  const PyramidSpec&);
template PerturbationPyramid<float> project_pyramid<float>(const PerturbationPyramid<float>&,
                                                           const PyramidSpec&);
template PerturbationPyramid<double> project_pyramid<double>(
    const PerturbationPyramid<double>&, const PyramidSpec&);
template PerturbationPyramid<float> random_perturbation<float>(const PyramidSpec&, int,
                                                               const ImageShape&,
                                                               std::uint64_t);
template PerturbationPyramid<double> random_perturbation<double>(const PyramidSpec&, int,
                                                                 const ImageShape&,
                                                                 std::uint64_t);

}  // namespace pyramidat
