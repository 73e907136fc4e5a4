#include "pyramidat/vit.hpp"

namespace pyramidat {

template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t);

template Tensor<float> forward<float>(const ModelParams<float>&, const Tensor<float>&,
                                      const DropRealization&, MaskRecorder*, int);
template Tensor<double> forward<double>(const ModelParams<double>&, const Tensor<double>&,
                                        const DropRealization&, MaskRecorder*, int);

template CrossEntropy<float> softmax_cross_entropy<float>(const Tensor<float>&,
                                                          const std::vector<int>&, float);
template CrossEntropy<double> softmax_cross_entropy<double>(const Tensor<double>&,
                                                            const std::vector<int>&, double);

template BatchResult<float> forward_backward<float>(const ModelParams<float>&,
                                                    const Tensor<float>&,
                                                    const std::vector<int>&,
                                                    const DropRealization&, GradKind,
                                                    Gradients<float>*, Tensor<float>*,
                                                    MaskRecorder*, int, float);
template BatchResult<double> forward_backward<double>(const ModelParams<double>&,
                                                      const Tensor<double>&,
                                                      const std::vector<int>&,
                                                      const DropRealization&, GradKind,
                                                      Gradients<double>*, Tensor<double>*,
                                                      MaskRecorder*, int, double);

}  // namespace pyramidat
